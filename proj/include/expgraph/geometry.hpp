#pragma once

#include <cmath>

namespace expgraph {

// Position on the image plane in normalized coordinates: u runs along the
// image width, v along the height, both nominally in [0, 1].
struct Vec2 {
    double u = 0.0;
    double v = 0.0;

    friend constexpr Vec2 operator+(Vec2 a, Vec2 b) { return {a.u + b.u, a.v + b.v}; }
    friend constexpr Vec2 operator-(Vec2 a, Vec2 b) { return {a.u - b.u, a.v - b.v}; }
    friend constexpr Vec2 operator*(double s, Vec2 a) { return {s * a.u, s * a.v}; }
    friend constexpr Vec2 operator*(Vec2 a, double s) { return {s * a.u, s * a.v}; }
    friend constexpr Vec2 operator/(Vec2 a, double s) { return {a.u / s, a.v / s}; }
    constexpr Vec2& operator+=(Vec2 b) { u += b.u; v += b.v; return *this; }
    constexpr Vec2& operator-=(Vec2 b) { u -= b.u; v -= b.v; return *this; }
    friend constexpr bool operator==(Vec2, Vec2) = default;
};

constexpr double squared_norm(Vec2 a) { return a.u * a.u + a.v * a.v; }
inline double norm(Vec2 a) { return std::hypot(a.u, a.v); }

inline constexpr double kPi = 3.14159265358979323846;
inline const double kUnitDiagonal = std::sqrt(2.0);

// Log of the isotropic 2-D normal density N(p | mean, variance * I).
inline double log_gaussian2(Vec2 p, Vec2 mean, double variance) {
    return -std::log(2.0 * kPi * variance) - squared_norm(p - mean) / (2.0 * variance);
}

inline double gaussian2(Vec2 p, Vec2 mean, double variance) {
    return std::exp(log_gaussian2(p, mean, variance));
}

}  // namespace expgraph
