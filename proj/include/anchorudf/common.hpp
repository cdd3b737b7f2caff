#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>

namespace audf {

// Thrown for malformed or missing input data (files, indices, headers).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a computation degenerates numerically (non-finite loss,
// failed extraction, undefined direction).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    constexpr Vec3() = default;
    constexpr Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

    double& operator[](int i) { return (&x)[i]; }
    double operator[](int i) const { return (&x)[i]; }

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }
    bool operator==(const Vec3& o) const { return x == o.x && y == o.y && z == o.z; }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double squared_norm() const { return dot(*this); }
    double norm() const { return std::sqrt(squared_norm()); }
    Vec3 normalized() const {
        double n = norm();
        return n > 0.0 ? *this / n : Vec3{0.0, 0.0, 0.0};
    }
    bool finite() const {
        return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
    }
    static Vec3 min(const Vec3& a, const Vec3& b) {
        return {std::min(a.x, b.x), std::min(a.y, b.y), std::min(a.z, b.z)};
    }
    static Vec3 max(const Vec3& a, const Vec3& b) {
        return {std::max(a.x, b.x), std::max(a.y, b.y), std::max(a.z, b.z)};
    }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

struct Aabb {
    Vec3 lo{std::numeric_limits<double>::infinity(),
            std::numeric_limits<double>::infinity(),
            std::numeric_limits<double>::infinity()};
    Vec3 hi{-std::numeric_limits<double>::infinity(),
            -std::numeric_limits<double>::infinity(),
            -std::numeric_limits<double>::infinity()};

    void expand(const Vec3& p) { lo = Vec3::min(lo, p); hi = Vec3::max(hi, p); }
    void expand(const Aabb& b) { lo = Vec3::min(lo, b.lo); hi = Vec3::max(hi, b.hi); }
    Vec3 center() const { return (lo + hi) * 0.5; }
    Vec3 extent() const { return hi - lo; }
    bool valid() const { return lo.x <= hi.x && lo.y <= hi.y && lo.z <= hi.z; }

    // Squared distance from p to the box (0 inside).
    double squared_distance(const Vec3& p) const {
        double d2 = 0.0;
        for (int i = 0; i < 3; ++i) {
            double v = p[i];
            if (v < lo[i]) { double d = lo[i] - v; d2 += d * d; }
            else if (v > hi[i]) { double d = v - hi[i]; d2 += d * d; }
        }
        return d2;
    }
};

// --- little-endian binary i/o -------------------------------------------
// All file formats in this library are explicitly little-endian.

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64_le(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    write_u64_le(os, bits);
}

inline std::uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw DataError("unexpected end of file while reading u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t read_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw DataError("unexpected end of file while reading u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double read_f64_le(std::istream& is) {
    std::uint64_t bits = read_u64_le(is);
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

// Distance below which the ground-truth direction (p - q)/|p - q| is treated
// as undefined; see grad_dir_exact.
inline constexpr double kDirectionEpsilon = 1e-8;

}  // namespace audf
