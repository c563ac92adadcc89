#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace twoscale {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;

/// Axis-aligned rectangle [x0,x1] x [y0,y1].
struct Rect {
    double x0 = 0.0;
    double x1 = 1.0;
    double y0 = 0.0;
    double y1 = 1.0;

    [[nodiscard]] double width() const { return x1 - x0; }
    [[nodiscard]] double height() const { return y1 - y0; }
    [[nodiscard]] double area() const { return width() * height(); }
    [[nodiscard]] Vec2 center() const { return {0.5 * (x0 + x1), 0.5 * (y0 + y1)}; }
    [[nodiscard]] bool degenerate() const { return !(x1 > x0) || !(y1 > y0); }

    /// Closed containment with an absolute slack.
    [[nodiscard]] bool contains(const Vec2& p, double slack = 0.0) const {
        return p.x() >= x0 - slack && p.x() <= x1 + slack && p.y() >= y0 - slack &&
               p.y() <= y1 + slack;
    }
};

/// Raised for violated preconditions on user-facing inputs.
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a linear system cannot be solved.
class SingularSystem : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace twoscale
