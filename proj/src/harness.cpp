#include "twoscale/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

namespace twoscale {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

const char* problem_name(ProblemKind k) {
    switch (k) {
        case ProblemKind::Periodic: return "periodic";
        case ProblemKind::QuasiPeriodic: return "quasi-periodic";
        case ProblemKind::Spe10: return "spe10";
    }
    return "?";
}

ProblemKind parse_problem(const std::string& s) {
    if (s == "periodic") return ProblemKind::Periodic;
    if (s == "quasi-periodic") return ProblemKind::QuasiPeriodic;
    if (s == "spe10") return ProblemKind::Spe10;
    throw InvalidInput("unknown problem '" + s + "'");
}

const char* lmode_name(LMode m) {
    switch (m) {
        case LMode::Paper: return "quarter-max";
        case LMode::HalfMax: return "half-max";
        case LMode::Max: return "max";
        case LMode::Explicit: return "explicit";
    }
    return "?";
}

LMode parse_lmode(const std::string& s) {
    if (s == "quarter-max") return LMode::Paper;
    if (s == "half-max") return LMode::HalfMax;
    if (s == "max") return LMode::Max;
    if (s == "explicit") return LMode::Explicit;
    throw InvalidInput("unknown l_mode '" + s + "'");
}

std::string hex(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

Rect corner_cell(const Rect& d, Corner c, double w, double h) {
    switch (c) {
        case Corner::LowerLeft: return {d.x0, d.x0 + w, d.y0, d.y0 + h};
        case Corner::LowerRight: return {d.x1 - w, d.x1, d.y0, d.y0 + h};
        case Corner::UpperLeft: return {d.x0, d.x0 + w, d.y1 - h, d.y1};
        case Corner::UpperRight: return {d.x1 - w, d.x1, d.y1 - h, d.y1};
    }
    return d;
}

std::vector<Mat2> triangle_tensors(const TriMesh& mesh, const CoarseGrid& grid, const TensorCache& cache,
                                   const MacroSetup& s) {
    return macro_coefficients(mesh, cache, tensor_context(*s.field, grid), s.micro_n, s.model, false);
}

AnisotropyMetrics grid_anisotropy(const CoarseGrid& grid, const TensorCache& cache, const MacroSetup& s) {
    std::vector<Mat2> k;
    std::vector<double> a;
    for (const CellKey& key : grid.leaves()) {
        k.push_back(cache.at({cell_id(key), tensor_context(*s.field, grid), s.micro_n, s.model}).K);
        a.push_back(grid.rect_of(key).area());
    }
    return anisotropy_metrics(k, a);
}

void write_tensor_vtk(const fs::path& path, const TriMesh& mesh, const std::vector<Mat2>& k) {
    VtkCellField k11{"K11", {}}, k12{"K12", {}}, k22{"K22", {}}, level{"owner_level", {}};
    for (std::size_t t = 0; t < k.size(); ++t) {
        k11.values.push_back(k[t](0, 0));
        k12.values.push_back(k[t](0, 1));
        k22.values.push_back(k[t](1, 1));
        level.values.push_back(cell_key(mesh.owner[t]).level);
    }
    write_vtk(path, mesh, {k11, k12, k22, level});
}

std::string step_name(const char* stem, int step, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%03d.%s", stem, step, ext);
    return buf;
}

fs::path tensor_cache_file(const ExperimentConfig& cfg, const PermeabilityField& field) {
    return cfg.resolved_cache_dir() / ("tensors_" + hex(field.hash()) + ".csv");
}

MacroSetup macro_setup(const ExperimentConfig& cfg, const PermeabilityField& field) {
    MacroSetup s;
    s.field = &field;
    s.law = cubic_law(cfg.R);
    s.source = corner_sources(cfg, field.domain(), cfg.coarse_nx, cfg.coarse_ny);
    s.micro_n = cfg.micro_n;
    s.model = cfg.model;
    s.diagonal_only = cfg.diagonal_only;
    s.threads = cfg.threads();
    return s;
}

struct MacroOutcome {
    std::optional<MacroRun> run;
    IterationLog log;
    std::shared_ptr<TensorCache> cache = std::make_shared<TensorCache>();
    double seconds = 0.0;
    std::size_t cached_tensors = 0;
};

/// Macro run with per-step VTK output into `art` under `prefix`.
MacroOutcome macro_with_artifacts(const ExperimentConfig& cfg, const PermeabilityField& field,
                                  const MacroSetup& setup, ArtifactSet& art, const std::string& prefix) {
    MacroOutcome out;
    TensorCache& cache = *out.cache;
    const fs::path cache_file = tensor_cache_file(cfg, field);
    out.cached_tensors = load_tensor_cache(cache, cache_file);
    const int steps = cfg.time_config().num_steps();
    MeshPtr prev_mesh;
    const auto t0 = Clock::now();
    auto observer = [&](int n, const CoarseGrid&, const MixedSolution& sol, const IndicatorField* ind) {
        if (ind && prev_mesh) {
            write_vtk(art.add(prefix + step_name("indicator", n, "vtk")), *prev_mesh, {{"eta", ind->eta}});
        }
        if ((cfg.vtk_every > 0 && n % cfg.vtk_every == 0) || n == steps) {
            write_solution_vtk(art.add(prefix + step_name("solution", n, "vtk")), sol);
        }
        prev_mesh = sol.mesh;
    };
    AdaptivityConfig adapt = cfg.adapt;
    try {
        out.run = run_macro(CoarseGrid(cfg.coarse_nx, cfg.coarse_ny, field.domain()), cache, setup, adapt,
                            cfg.time_config(), out.log, observer);
    } catch (...) {
        out.log.write_csv(art.add(prefix + "iterations.csv"));
        save_tensor_cache(cache, cache_file);
        throw;
    }
    out.seconds = seconds_since(t0);
    save_tensor_cache(cache, cache_file);
    out.log.write_csv(art.add(prefix + "iterations.csv"));
    write_tensor_csv(art.add(prefix + "tensors.csv"), out.run->grid, cache, tensor_context(field, out.run->grid),
                     setup.micro_n,
                     setup.model);
    write_tensor_vtk(art.add(prefix + "tensors.vtk"), *out.run->mesh, triangle_tensors(*out.run->mesh, out.run->grid, cache, setup));
    return out;
}

json iteration_stats(const IterationLog& log, int steps) {
    int total = 0, newton_max = 0;
    for (int n = 1; n <= steps; ++n) {
        const auto rec = log.step_records(n);
        total += static_cast<int>(rec.size());
        int newton = 0;
        for (const auto& r : rec) newton += r.scheme == Scheme::Newton;
        newton_max = std::max(newton_max, newton);
    }
    return {{"total", total}, {"mean_per_step", steps ? double(total) / steps : 0.0}, {"max_newton_per_step", newton_max}};
}

json macro_summary(const ExperimentConfig& cfg, const MacroOutcome& m, const PermeabilityField& field,
                   const MacroSetup& setup) {
    json steps = json::array();
    for (const auto& s : m.run->steps) {
        steps.push_back({{"step", s.step},
                         {"leaves", s.leaves},
                         {"triangles", s.triangles},
                         {"iterations", s.iterations},
                         {"created", s.adapt.created.size()},
                         {"deleted", s.adapt.deleted.size()},
                         {"new_solves", s.adapt.new_solves},
                         {"eta_max", s.eta_max}});
    }
    TensorCache& cache = *m.cache;
    // Level-0 tensors stay in the cache after their cells are refined.
    CoarseGrid base(cfg.coarse_nx, cfg.coarse_ny, field.domain());
    cache.ensure(field, base, base.leaves(), setup.micro_n, setup.model, setup.threads);
    const auto tau0 = grid_anisotropy(base, cache, setup);
    const auto tau = grid_anisotropy(m.run->grid, cache, setup);
    return {{"final_leaves", m.run->grid.leaf_count()},
            {"final_triangles", m.run->mesh->num_triangles()},
            {"final_dofs", mixed_dofs(*m.run->mesh)},
            {"max_level", m.run->grid.max_level()},
            {"max_mass_ratio", m.run->summary.max_mass_ratio},
            {"iterations", iteration_stats(m.log, m.run->summary.steps)},
            {"anisotropy_level0", {{"tau1", tau0.tau1}, {"tau2", tau0.tau2}}},
            {"anisotropy_final", {{"tau1", tau.tau1}, {"tau2", tau.tau2}}},
            {"tensors_loaded_from_cache", m.cached_tensors},
            {"seconds", m.seconds},
            {"steps", steps}};
}

json fine_summary(const FineReference& f) {
    return {{"triangles", f.mesh->num_triangles()},
            {"dofs", mixed_dofs(*f.mesh)},
            {"total_iterations", f.total_iterations},
            {"max_mass_ratio", f.max_mass_ratio},
            {"from_cache", f.from_cache},
            {"seconds", f.seconds}};
}

json counts_at(const MacroRun& run, std::initializer_list<int> at) {
    json out = json::object();
    for (int n : at) {
        if (n >= 1 && n <= static_cast<int>(run.steps.size())) {
            const auto& s = run.steps[n - 1];
            out[std::to_string(n)] = {{"leaves", s.leaves}, {"triangles", s.triangles}};
        }
    }
    return out;
}

template <class Body>
json guarded(ArtifactSet& art, const ExperimentConfig& cfg, const std::string& name, Body&& body) {
    json config;
    to_json(config, cfg);
    art.write_json("config.json", config);
    try {
        json report = body();
        report["experiment"] = name;
        report["status"] = "ok";
        art.write_json("report.json", report);
        art.write_manifest();
        return report;
    } catch (const std::exception& e) {
        art.write_json("report.json", {{"experiment", name}, {"status", "failed"}, {"error", e.what()}});
        art.write_manifest();
        throw;
    }
}

json adaptive_vs_fine(const ExperimentConfig& cfg, ArtifactSet& art) {
    const PermeabilityField field = make_field(cfg);
    IterationLog fine_log;
    const FineReference fine = fine_reference(cfg, field, &fine_log);
    if (!fine.from_cache) fine_log.write_csv(art.add("fine_iterations.csv"));
    write_solution_vtk(art.add("fine_final.vtk"), fine.trajectory.back());

    const MacroSetup setup = macro_setup(cfg, field);
    MacroOutcome m = macro_with_artifacts(cfg, field, setup, art, "");
    const auto err = time_integrated_error(m.run->trajectory, fine.trajectory, cfg.dt);
    const double e_final = relative_error_eH(m.run->trajectory.back(), fine.trajectory.back());
    json r;
    r["problem"] = problem_name(cfg.problem);
    r["E_T"] = err.E_T;
    r["E_T2"] = err.E_T2;
    r["E_T2_nearest_reported"] = nearest_reported_figure(err.E_T2);
    r["e_final"] = e_final;
    r["dof_fraction"] = double(mixed_dofs(*m.run->mesh)) / double(mixed_dofs(*fine.mesh));
    r["macro"] = macro_summary(cfg, m, field, setup);
    r["macro"]["counts_at"] = counts_at(*m.run, {16, 32, 50});
    r["fine"] = fine_summary(fine);
    r["wall_clock"] = {{"fine", fine.seconds}, {"macro", m.seconds}};
    return r;
}

json compare_harmonic(const ExperimentConfig& cfg, ArtifactSet& art) {
    const PermeabilityField field = make_field(cfg);
    const FineReference fine = fine_reference(cfg, field);
    json r;
    r["problem"] = problem_name(cfg.problem);
    r["fine"] = fine_summary(fine);
    double errs[2] = {0.0, 0.0};
    int k = 0;
    for (TensorModel model : {TensorModel::Homogenized, TensorModel::Harmonic}) {
        ExperimentConfig c = cfg;
        c.model = model;
        const MacroSetup setup = macro_setup(c, field);
        const std::string tag = model == TensorModel::Homogenized ? "homogenized" : "harmonic";
        MacroOutcome m = macro_with_artifacts(c, field, setup, art, tag + "_");
        const auto err = time_integrated_error(m.run->trajectory, fine.trajectory, cfg.dt);
        errs[k++] = err.E_T;
        r[tag] = macro_summary(c, m, field, setup);
        r[tag]["E_T"] = err.E_T;
        r[tag]["E_T2"] = err.E_T2;
        r[tag]["e_final"] = relative_error_eH(m.run->trajectory.back(), fine.trajectory.back());
    }
    r["harmonic_excess_percent"] = 100.0 * (errs[1] - errs[0]) / errs[0];
    r["homogenized_lower"] = errs[0] < errs[1];
    return r;
}

// Reported Table 1 values, indexed [epsilon row][H column].
constexpr double kTable1[3][3] = {{0.1938, 0.1287, 0.0856}, {0.1797, 0.1138, 0.0724}, {0.1690, 0.1030, 0.0621}};

json table1(const ExperimentConfig& cfg, ArtifactSet& art) {
    json rows = json::array();
    std::vector<std::vector<double>> e(cfg.table1_inverse_eps.size());
    for (std::size_t a = 0; a < cfg.table1_inverse_eps.size(); ++a) {
        ExperimentConfig c = cfg;
        c.problem = ProblemKind::Periodic;
        c.epsilon = 1.0 / cfg.table1_inverse_eps[a];
        c.adapt.enabled = false;
        const PermeabilityField field = make_field(c);
        const FineReference fine = fine_reference(c, field);
        write_solution_vtk(art.add("fine_eps" + std::to_string(cfg.table1_inverse_eps[a]) + ".vtk"),
                           fine.trajectory.back());
        for (std::size_t b = 0; b < cfg.table1_nx.size(); ++b) {
            ExperimentConfig cc = c;
            const Rect d = field.domain();
            cc.coarse_nx = cfg.table1_nx[b];
            cc.coarse_ny = std::max(1, static_cast<int>(std::lround(cc.coarse_nx * d.height() / d.width())));
            const MacroSetup setup = macro_setup(cc, field);
            const std::string tag = "eps" + std::to_string(cfg.table1_inverse_eps[a]) + "_nx" +
                                    std::to_string(cc.coarse_nx) + "_";
            MacroOutcome m = macro_with_artifacts(cc, field, setup, art, tag);
            const double eh = relative_error_eH(m.run->trajectory.back(), fine.trajectory.back());
            e[a].push_back(eh);
            const double H = std::hypot(d.width() / cc.coarse_nx, d.height() / cc.coarse_ny);
            json row = {{"epsilon", c.epsilon},
                        {"inverse_epsilon", cfg.table1_inverse_eps[a]},
                        {"H", H},
                        {"coarse_nx", cc.coarse_nx},
                        {"coarse_ny", cc.coarse_ny},
                        {"e_H", eh},
                        {"macro_seconds", m.seconds},
                        {"fine_seconds", fine.seconds},
                        {"max_mass_ratio", std::max(m.run->summary.max_mass_ratio, fine.max_mass_ratio)}};
            if (a < 3 && b < 3 && cfg.table1_inverse_eps[a] == 8 << a && cfg.table1_nx[b] == 8 << b) {
                row["reported"] = kTable1[a][b];
            }
            rows.push_back(row);
        }
    }
    bool down_h = true, down_eps = true;
    for (const auto& col : e)
        for (std::size_t b = 1; b < col.size(); ++b) down_h = down_h && col[b] < col[b - 1];
    for (std::size_t a = 1; a < e.size(); ++a)
        for (std::size_t b = 0; b < e[a].size(); ++b) down_eps = down_eps && e[a][b] < e[a - 1][b];
    return {{"rows", rows}, {"decreasing_in_H", down_h}, {"decreasing_in_epsilon", down_eps}};
}

}  // namespace

TimeStepConfig ExperimentConfig::time_config(bool fine) const {
    TimeStepConfig t;
    t.dt = dt;
    t.T = T;
    t.l_mode = l_mode;
    t.L_value = L_value;
    t.switch_tol = switch_tol;
    t.final_tol = final_tol;
    t.newton_divergence_tol = newton_divergence_tol;
    t.max_iters = max_iters;
    t.newton = fine ? fine_newton : newton;
    return t;
}

int ExperimentConfig::threads() const {
    return serial ? 1 : std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

fs::path ExperimentConfig::resolved_cache_dir() const {
    return cache_dir.empty() ? out_dir / "cache" : cache_dir;
}

void ExperimentConfig::validate() const {
    time_config().validate();
    if (coarse_nx < 1 || coarse_ny < 1 || fine_nx < 1 || fine_ny < 1) throw InvalidInput("grid sizes must be positive");
    if (micro_n < 2) throw InvalidInput("micro_n must be at least 2");
    if (!(epsilon > 0)) throw InvalidInput("epsilon must be positive");
    if (!(R > 0)) throw InvalidInput("R must be positive");
    if (patch_cells < 1 && !(patch_size > 0)) throw InvalidInput("corner patch must be non-empty");
    if (adapt.max_level < 0) throw InvalidInput("max_level must be non-negative");
    if (!(adapt.theta_r > 0 && adapt.theta_r < 1) || !(adapt.theta_c >= 1)) {
        throw InvalidInput("need 0 < theta_r < 1 and theta_c >= 1");
    }
    if (vtk_every < 0) throw InvalidInput("vtk_every must be non-negative");
}

ExperimentConfig preset(const std::string& experiment) {
    ExperimentConfig c;
    if (experiment == "table1") {
        c.problem = ProblemKind::Periodic;
        c.adapt.enabled = false;
    } else if (experiment == "quasi-periodic") {
        c.problem = ProblemKind::QuasiPeriodic;
    } else if (experiment == "spe10" || experiment == "compare-harmonic") {
        c.problem = ProblemKind::Spe10;
        c.coarse_nx = 55;
        c.coarse_ny = 15;
        c.fine_nx = 220;
        c.fine_ny = 60;
        c.adapt.theta_r = 0.2;
        c.adapt.theta_c = 10.0;
        // Low-permeability pixels keep p near the degenerate point p = 0 of p^3, where
        // Newton contracts only linearly at first; let it run instead of falling back.
        c.newton_divergence_tol = 1.0;
    } else {
        throw InvalidInput("unknown experiment '" + experiment + "'");
    }
    return c;
}

void to_json(json& j, const ExperimentConfig& c) {
    j = {{"problem", problem_name(c.problem)},
         {"epsilon", c.epsilon},
         {"raster_path", c.raster_path},
         {"coarse_nx", c.coarse_nx},
         {"coarse_ny", c.coarse_ny},
         {"micro_n", c.micro_n},
         {"fine_nx", c.fine_nx},
         {"fine_ny", c.fine_ny},
         {"dt", c.dt},
         {"T", c.T},
         {"R", c.R},
         {"patch_cells", c.patch_cells},
         {"patch_size", c.patch_size},
         {"solver",
          {{"l_mode", lmode_name(c.l_mode)},
           {"L_value", c.L_value},
           {"switch_tol", c.switch_tol},
           {"final_tol", c.final_tol},
           {"newton_divergence_tol", c.newton_divergence_tol},
           {"max_iters", c.max_iters},
           {"newton", c.newton},
           {"fine_newton", c.fine_newton}}},
         {"adaptivity",
          {{"enabled", c.adapt.enabled},
           {"theta_r", c.adapt.theta_r},
           {"theta_c", c.adapt.theta_c},
           {"max_level", c.adapt.max_level},
           {"patch", c.adapt.patch == PatchMode::OneRing ? "one-ring" : "two-ring"}}},
         {"tensor_model", c.model == TensorModel::Homogenized ? "homogenized" : "harmonic"},
         {"diagonal_only", c.diagonal_only},
         {"table1", {{"inverse_epsilon", c.table1_inverse_eps}, {"coarse_nx", c.table1_nx}}},
         {"output",
          {{"directory", c.out_dir.string()}, {"cache_directory", c.cache_dir.string()}, {"vtk_every", c.vtk_every}}},
         {"serial", c.serial},
         {"seed", c.seed}};
}

void from_json(const json& j, ExperimentConfig& c) {
    auto get = [](const json& o, const char* key, auto& field) {
        if (o.contains(key)) o.at(key).get_to(field);
    };
    if (j.contains("problem")) c.problem = parse_problem(j.at("problem").get<std::string>());
    get(j, "epsilon", c.epsilon);
    get(j, "raster_path", c.raster_path);
    get(j, "coarse_nx", c.coarse_nx);
    get(j, "coarse_ny", c.coarse_ny);
    get(j, "micro_n", c.micro_n);
    get(j, "fine_nx", c.fine_nx);
    get(j, "fine_ny", c.fine_ny);
    get(j, "dt", c.dt);
    get(j, "T", c.T);
    get(j, "R", c.R);
    get(j, "patch_cells", c.patch_cells);
    get(j, "patch_size", c.patch_size);
    if (j.contains("solver")) {
        const json& s = j.at("solver");
        if (s.contains("l_mode")) c.l_mode = parse_lmode(s.at("l_mode").get<std::string>());
        get(s, "L_value", c.L_value);
        get(s, "switch_tol", c.switch_tol);
        get(s, "final_tol", c.final_tol);
        get(s, "newton_divergence_tol", c.newton_divergence_tol);
        get(s, "max_iters", c.max_iters);
        get(s, "newton", c.newton);
        get(s, "fine_newton", c.fine_newton);
    }
    if (j.contains("adaptivity")) {
        const json& a = j.at("adaptivity");
        get(a, "enabled", c.adapt.enabled);
        get(a, "theta_r", c.adapt.theta_r);
        get(a, "theta_c", c.adapt.theta_c);
        get(a, "max_level", c.adapt.max_level);
        if (a.contains("patch")) {
            const auto p = a.at("patch").get<std::string>();
            if (p != "one-ring" && p != "two-ring") throw InvalidInput("unknown patch mode '" + p + "'");
            c.adapt.patch = p == "one-ring" ? PatchMode::OneRing : PatchMode::TwoRing;
        }
    }
    if (j.contains("tensor_model")) {
        const auto m = j.at("tensor_model").get<std::string>();
        if (m != "homogenized" && m != "harmonic") throw InvalidInput("unknown tensor model '" + m + "'");
        c.model = m == "homogenized" ? TensorModel::Homogenized : TensorModel::Harmonic;
    }
    get(j, "diagonal_only", c.diagonal_only);
    if (j.contains("table1")) {
        get(j.at("table1"), "inverse_epsilon", c.table1_inverse_eps);
        get(j.at("table1"), "coarse_nx", c.table1_nx);
    }
    if (j.contains("output")) {
        const json& o = j.at("output");
        if (o.contains("directory")) c.out_dir = o.at("directory").get<std::string>();
        if (o.contains("cache_directory")) c.cache_dir = o.at("cache_directory").get<std::string>();
        get(o, "vtk_every", c.vtk_every);
    }
    get(j, "serial", c.serial);
    get(j, "seed", c.seed);
}

ExperimentConfig load_config(const fs::path& path, ExperimentConfig base) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open config " + path.string());
    try {
        from_json(json::parse(in), base);
    } catch (const json::exception& e) {
        throw InvalidInput("malformed config " + path.string() + ": " + e.what());
    }
    base.validate();
    return base;
}

PermeabilityField make_field(const ExperimentConfig& cfg) {
    switch (cfg.problem) {
        case ProblemKind::Periodic: return quasi_periodic_field({.epsilon = cfg.epsilon, .inclusions = false});
        case ProblemKind::QuasiPeriodic: return quasi_periodic_field({.epsilon = cfg.epsilon, .inclusions = true});
        case ProblemKind::Spe10: {
            std::string path = cfg.raster_path;
            if (path.empty()) {
                if (const char* env = std::getenv("TWOSCALE_SPE10_RASTER")) path = env;
            }
            if (path.empty() || !fs::exists(path)) {
                throw InvalidInput("SPE10 dataset missing: set raster_path or TWOSCALE_SPE10_RASTER "
                                   "(convert with tools/spe10_convert.py)");
            }
            return load_raster(path);
        }
    }
    throw InvalidInput("unknown problem");
}

SourceSpec corner_sources(const ExperimentConfig& cfg, const Rect& d, int nx, int ny) {
    const double w = cfg.patch_size > 0 ? cfg.patch_size : cfg.patch_cells * d.width() / nx;
    const double h = cfg.patch_size > 0 ? cfg.patch_size : cfg.patch_cells * d.height() / ny;
    const bool spe = cfg.problem == ProblemKind::Spe10;
    SourceSpec s;
    s.patches = {{Region::make_box(corner_cell(d, Corner::UpperRight, w, h)), spe ? 0.0 : 1.0},
                 {Region::make_box(corner_cell(d, Corner::LowerLeft, w, h)), spe ? 1.0 : 0.0}};
    s.validate();
    return s;
}

double relative_error_eH(const MixedSolution& coarse, const MixedSolution& fine) {
    const auto proj = l2_project(*coarse.mesh, coarse.p, *fine.mesh);
    const double denom = l2_norm(*fine.mesh, fine.p);
    if (!(denom > 0)) throw InvalidInput("relative error against a zero fine solution");
    std::vector<double> d(proj.size());
    for (std::size_t t = 0; t < d.size(); ++t) d[t] = proj[t] - fine.p[t];
    return l2_norm(*fine.mesh, d) / denom;
}

TimeIntegratedError time_integrated_error(const std::vector<MixedSolution>& coarse,
                                          const std::vector<MixedSolution>& fine, double dt) {
    if (coarse.size() != fine.size() || coarse.empty()) {
        throw InvalidInput("time_integrated_error: trajectories must share the time grid");
    }
    if (!(dt > 0)) throw InvalidInput("time_integrated_error: dt must be positive");
    double num = 0.0, den = 0.0;
    for (std::size_t n = 0; n < fine.size(); ++n) {
        const TriMesh& fm = *fine[n].mesh;
        const auto proj = l2_project(*coarse[n].mesh, coarse[n].p, fm);
        std::vector<double> d(proj.size());
        for (std::size_t t = 0; t < d.size(); ++t) d[t] = proj[t] - fine[n].p[t];
        const double a = l2_norm(fm, d), b = l2_norm(fm, fine[n].p);
        num += dt * a * a;
        den += dt * b * b;
    }
    if (!(den > 0)) throw InvalidInput("time_integrated_error: zero fine trajectory");
    TimeIntegratedError e;
    e.E_T2 = num / den;
    e.E_T = std::sqrt(e.E_T2);
    return e;
}

std::size_t mixed_dofs(const TriMesh& mesh) { return mesh.num_edges() + mesh.num_triangles(); }

std::string nearest_reported_figure(double e_t2) {
    const double a = std::abs(std::log(e_t2 / 0.0507));
    const double b = std::abs(std::log(e_t2 / 0.016));
    return a <= b ? "0.0507" : "0.016";
}

FineReference fine_reference(const ExperimentConfig& cfg, const PermeabilityField& field, IterationLog* log) {
    const Rect d = field.domain();
    const SourceSpec src = corner_sources(cfg, d, cfg.fine_nx, cfg.fine_ny);
    const TimeStepConfig tc = cfg.time_config(true);
    std::ostringstream key;
    key.precision(17);
    key << "fine-v1:" << field.hash() << ':' << cfg.fine_nx << ':' << cfg.fine_ny << ':' << tc.dt << ':' << tc.T
        << ':' << cfg.R << ':' << int(tc.l_mode) << ':' << tc.L_value << ':' << tc.switch_tol << ':'
        << tc.final_tol << ':' << tc.newton_divergence_tol << ':' << tc.newton;
    for (const auto& p : src.patches) {
        key << ':' << p.region.box.x0 << ',' << p.region.box.x1 << ',' << p.region.box.y0 << ','
            << p.region.box.y1 << '=' << p.value;
    }
    const fs::path file = cfg.resolved_cache_dir() / ("fine_" + hex(fnv1a(key.str())) + ".bin");

    FineReference ref;
    ref.mesh = std::make_shared<const TriMesh>(build_uniform_trimesh(cfg.fine_nx, cfg.fine_ny, d));
    const std::size_t nt = ref.mesh->num_triangles(), ne = ref.mesh->num_edges();
    const int steps = tc.num_steps();

    if (std::ifstream in{file, std::ios::binary}) {
        std::int32_t s = 0, iters = 0;
        std::uint64_t t = 0, e = 0;
        double mass = 0.0;
        in.read(reinterpret_cast<char*>(&s), sizeof s);
        in.read(reinterpret_cast<char*>(&t), sizeof t);
        in.read(reinterpret_cast<char*>(&e), sizeof e);
        in.read(reinterpret_cast<char*>(&iters), sizeof iters);
        in.read(reinterpret_cast<char*>(&mass), sizeof mass);
        if (in && s == steps && t == nt && e == ne) {
            for (int n = 0; n < steps && in; ++n) {
                MixedSolution sol;
                sol.mesh = ref.mesh;
                sol.p.resize(nt);
                in.read(reinterpret_cast<char*>(sol.p.data()), std::streamsize(nt * sizeof(double)));
                ref.trajectory.push_back(std::move(sol));
            }
            ref.trajectory.back().u.resize(ne);
            in.read(reinterpret_cast<char*>(ref.trajectory.back().u.data()), std::streamsize(ne * sizeof(double)));
            if (in) {
                ref.total_iterations = iters;
                ref.max_mass_ratio = mass;
                ref.from_cache = true;
                return ref;
            }
            ref.trajectory.clear();
        }
    }

    const auto t0 = Clock::now();
    IterationLog local;
    SimulationHooks hooks;
    hooks.after_step = [&](int, double, const StepResult& r) {
        MixedSolution sol;
        sol.mesh = ref.mesh;
        sol.p = r.solution.p;
        ref.trajectory.push_back(std::move(sol));
    };
    const FlowProblem fp = make_fine_problem(ref.mesh, field, cubic_law(cfg.R), src);
    const auto summary = run_simulation(fp, tc, std::vector<double>(nt, 0.0), log ? *log : local, hooks);
    ref.trajectory.back().u = summary.final_solution.u;
    ref.total_iterations = summary.total_iterations;
    ref.max_mass_ratio = summary.max_mass_ratio;
    ref.seconds = seconds_since(t0);

    fs::create_directories(file.parent_path());
    const fs::path tmp = file.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        const std::int32_t s = steps, iters = ref.total_iterations;
        const std::uint64_t t = nt, e = ne;
        out.write(reinterpret_cast<const char*>(&s), sizeof s);
        out.write(reinterpret_cast<const char*>(&t), sizeof t);
        out.write(reinterpret_cast<const char*>(&e), sizeof e);
        out.write(reinterpret_cast<const char*>(&iters), sizeof iters);
        out.write(reinterpret_cast<const char*>(&ref.max_mass_ratio), sizeof ref.max_mass_ratio);
        for (const auto& sol : ref.trajectory) {
            out.write(reinterpret_cast<const char*>(sol.p.data()), std::streamsize(nt * sizeof(double)));
        }
        out.write(reinterpret_cast<const char*>(ref.trajectory.back().u.data()), std::streamsize(ne * sizeof(double)));
    }
    fs::rename(tmp, file);
    return ref;
}

void save_tensor_cache(const TensorCache& cache, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw InvalidInput("cannot write " + tmp.string());
        out.precision(17);
        out << "cell_id,context,micro_n,model,K11,K12,K22,asymmetry,effective_micro_n\n";
        for (const auto& [k, v] : cache.entries()) {
            out << k.cell << ',' << k.context << ',' << k.micro_n << ',' << int(k.model) << ',' << v.K(0, 0)
                << ',' << v.K(0, 1) << ',' << v.K(1, 1) << ',' << v.asymmetry << ',' << v.micro_n << '\n';
        }
    }
    fs::rename(tmp, path);
}

std::size_t load_tensor_cache(TensorCache& cache, const fs::path& path) {
    std::ifstream in(path);
    if (!in) return 0;
    std::string line;
    std::getline(in, line);
    std::size_t n = 0;
    while (std::getline(in, line)) {
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream row(line);
        TensorCache::Key k{};
        int model = 0;
        EffectiveTensor v;
        double k11 = 0, k12 = 0, k22 = 0;
        if (!(row >> k.cell >> k.context >> k.micro_n >> model >> k11 >> k12 >> k22 >> v.asymmetry >> v.micro_n)) {
            throw InvalidInput("malformed tensor cache " + path.string());
        }
        k.model = static_cast<TensorModel>(model);
        v.K << k11, k12, k12, k22;
        cache.insert(k, v);
        ++n;
    }
    return n;
}

void write_vtk(const fs::path& path, const TriMesh& mesh, const std::vector<VtkCellField>& scalars,
               const std::vector<VtkVectorField>& vectors) {
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot write " + path.string());
    out.precision(10);
    out << "# vtk DataFile Version 3.0\ntwoscale\nASCII\nDATASET UNSTRUCTURED_GRID\n";
    out << "POINTS " << mesh.num_vertices() << " double\n";
    for (const Vec2& v : mesh.vertices) out << v.x() << ' ' << v.y() << " 0\n";
    const std::size_t nt = mesh.num_triangles();
    out << "CELLS " << nt << ' ' << 4 * nt << '\n';
    for (const auto& t : mesh.triangles) out << "3 " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
    out << "CELL_TYPES " << nt << '\n';
    for (std::size_t t = 0; t < nt; ++t) out << "5\n";
    if (scalars.empty() && vectors.empty()) return;
    out << "CELL_DATA " << nt << '\n';
    for (const auto& f : scalars) {
        if (f.values.size() != nt) throw InvalidInput("VTK field '" + f.name + "' does not match the mesh");
        out << "SCALARS " << f.name << " double 1\nLOOKUP_TABLE default\n";
        for (double v : f.values) out << v << '\n';
    }
    for (const auto& f : vectors) {
        if (f.values.size() != nt) throw InvalidInput("VTK field '" + f.name + "' does not match the mesh");
        out << "VECTORS " << f.name << " double\n";
        for (const Vec2& v : f.values) out << v.x() << ' ' << v.y() << " 0\n";
    }
}

void write_solution_vtk(const fs::path& path, const MixedSolution& sol) {
    const TriMesh& m = *sol.mesh;
    VtkVectorField flux{"flux", {}};
    VtkCellField mag{"flux_magnitude", {}};
    if (sol.u.size() == m.num_edges()) {
        for (std::size_t t = 0; t < m.num_triangles(); ++t) {
            flux.values.push_back(rt0_value(m, sol.u, int(t), m.centroid[t]));
            mag.values.push_back(flux.values.back().norm());
        }
        write_vtk(path, m, {{"pressure", sol.p}, mag}, {flux});
    } else {
        write_vtk(path, m, {{"pressure", sol.p}});
    }
}

ArtifactSet::ArtifactSet(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

fs::path ArtifactSet::add(const std::string& name) {
    if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
    return dir_ / name;
}

void ArtifactSet::write_json(const std::string& name, const json& j) {
    std::ofstream out(add(name));
    if (!out) throw InvalidInput("cannot write " + (dir_ / name).string());
    out << j.dump(2) << '\n';
}

void ArtifactSet::write_manifest() const {
    json files = json::array();
    for (const auto& f : files_) {
        const fs::path p = dir_ / f;
        files.push_back({{"name", f}, {"bytes", fs::exists(p) ? fs::file_size(p) : 0}});
    }
    std::ofstream out(dir_ / "manifest.json");
    out << json{{"files", files}}.dump(2) << '\n';
}

json run_experiment(const std::string& experiment, const ExperimentConfig& cfg) {
    cfg.validate();
    ArtifactSet art(cfg.out_dir / experiment);
    if (experiment == "table1") return guarded(art, cfg, experiment, [&] { return table1(cfg, art); });
    if (experiment == "quasi-periodic" || experiment == "spe10") {
        return guarded(art, cfg, experiment, [&] { return adaptive_vs_fine(cfg, art); });
    }
    if (experiment == "compare-harmonic") {
        return guarded(art, cfg, experiment, [&] { return compare_harmonic(cfg, art); });
    }
    throw InvalidInput("unknown experiment '" + experiment + "'");
}

json run_macro_command(const ExperimentConfig& cfg) {
    cfg.validate();
    ArtifactSet art(cfg.out_dir / "run-macro");
    return guarded(art, cfg, "run-macro", [&] {
        const PermeabilityField field = make_field(cfg);
        const MacroSetup setup = macro_setup(cfg, field);
        MacroOutcome m = macro_with_artifacts(cfg, field, setup, art, "");
        json r = macro_summary(cfg, m, field, setup);
        r["problem"] = problem_name(cfg.problem);
        return r;
    });
}

json run_fine_command(const ExperimentConfig& cfg) {
    cfg.validate();
    ArtifactSet art(cfg.out_dir / "run-fine");
    return guarded(art, cfg, "run-fine", [&] {
        const PermeabilityField field = make_field(cfg);
        IterationLog log;
        const FineReference fine = fine_reference(cfg, field, &log);
        if (!fine.from_cache) log.write_csv(art.add("iterations.csv"));
        write_solution_vtk(art.add("fine_final.vtk"), fine.trajectory.back());
        json r = fine_summary(fine);
        r["problem"] = problem_name(cfg.problem);
        return r;
    });
}

json upscale_command(const ExperimentConfig& cfg) {
    cfg.validate();
    ArtifactSet art(cfg.out_dir / "upscale");
    return guarded(art, cfg, "upscale", [&] {
        const PermeabilityField field = make_field(cfg);
        const MacroSetup setup = macro_setup(cfg, field);
        CoarseGrid grid(cfg.coarse_nx, cfg.coarse_ny, field.domain());
        TensorCache cache;
        const auto loaded = load_tensor_cache(cache, tensor_cache_file(cfg, field));
        const auto t0 = Clock::now();
        const auto solves = cache.ensure(field, grid, grid.leaves(), setup.micro_n, setup.model, setup.threads);
        const double secs = seconds_since(t0);
        save_tensor_cache(cache, tensor_cache_file(cfg, field));
        const std::uint64_t context = tensor_context(field, grid);
        write_tensor_csv(art.add("tensors.csv"), grid, cache, context, setup.micro_n, setup.model);
        const TriMesh mesh = triangulate(grid);
        write_tensor_vtk(art.add("tensors.vtk"), mesh, triangle_tensors(mesh, grid, cache, setup));
        const auto tau = grid_anisotropy(grid, cache, setup);
        double asym = 0.0;
        for (const CellKey& k : grid.leaves()) {
            asym = std::max(asym, cache.at({cell_id(k), context, setup.micro_n, setup.model}).asymmetry);
        }
        return json{{"problem", problem_name(cfg.problem)},
                    {"cells", grid.leaf_count()},
                    {"new_solves", solves},
                    {"loaded_from_cache", loaded},
                    {"tau1", tau.tau1},
                    {"tau2", tau.tau2},
                    {"max_asymmetry", asym},
                    {"seconds", secs}};
    });
}

}  // namespace twoscale
