#!/usr/bin/env python3
"""Convert the SPE10 model 2 permeability file (spe_perm.dat) into a raster for twoscale.

Takes the top-layer Kx, lays the 220-cell direction along x, normalizes by the maximum
and writes whitespace-separated values (bottom row first) plus a JSON sidecar.

    python3 tools/spe10_convert.py spe_perm.dat spe10_top.txt
    export TWOSCALE_SPE10_RASTER=$PWD/spe10_top.txt
"""
import argparse
import json

import numpy as np

NX, NY, NZ = 60, 220, 85


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("perm", help="spe_perm.dat (Kx, Ky, Kz blocks, x fastest)")
    ap.add_argument("out", help="output raster; the sidecar is written to OUT.json")
    ap.add_argument("--layer", type=int, default=0, help="layer index, 0 is the top")
    args = ap.parse_args()

    values = np.loadtxt(args.perm).ravel()
    if values.size != 3 * NX * NY * NZ:
        raise SystemExit(f"expected {3 * NX * NY * NZ} values, found {values.size}")
    kx = values[: NX * NY * NZ].reshape(NZ, NY, NX)[args.layer]
    # Rows of the raster follow the 60-cell direction, columns the 220-cell one.
    raster = kx.T / kx.max()
    np.savetxt(args.out, raster, fmt="%.10g")

    h = 1.0 / NY
    sidecar = {"ncols": NY, "nrows": NX, "x0": 0.0, "y0": 0.0, "dx": h, "dy": h,
               "scale": "linear", "row_order": "bottom-up"}
    with open(args.out + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)


if __name__ == "__main__":
    main()
