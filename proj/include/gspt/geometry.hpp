#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace gspt {

struct Vec3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    constexpr Vec3 operator-() const { return {-x, -y, -z}; }
    constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    constexpr Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    constexpr Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    constexpr Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    constexpr double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }
    constexpr double& operator[](std::size_t i) { return i == 0 ? x : (i == 1 ? y : z); }
    constexpr bool operator==(const Vec3&) const = default;
};

constexpr Vec3 operator*(double s, const Vec3& v) { return v * s; }
constexpr double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
constexpr double squared_norm(const Vec3& v) { return dot(v, v); }
inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }
inline Vec3 normalized(const Vec3& v) { return v / norm(v); }
constexpr double squared_distance(const Vec3& a, const Vec3& b) { return squared_norm(a - b); }
inline bool is_finite(const Vec3& v) { return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z); }

/// Row-major 3x3 matrix.
struct Mat3 {
    double m[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};

    Vec3 operator*(const Vec3& v) const {
        return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
                m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
                m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
    }
    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0.0;
                for (int k = 0; k < 3; ++k) s += m[i][k] * o.m[k][j];
                r.m[i][j] = s;
            }
        return r;
    }
    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r.m[i][j] = m[j][i];
        return r;
    }
    static Mat3 diagonal(const Vec3& d) {
        Mat3 r;
        r.m[0][0] = d.x; r.m[1][1] = d.y; r.m[2][2] = d.z;
        return r;
    }
};

/// Ordered 3D points in normalized object coordinates.
struct PointCloud {
    std::vector<Vec3> points;

    PointCloud() = default;
    explicit PointCloud(std::vector<Vec3> pts) : points(std::move(pts)) {}

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
    const Vec3& operator[](std::size_t i) const { return points[i]; }
    Vec3& operator[](std::size_t i) { return points[i]; }
    bool operator==(const PointCloud&) const = default;
};

using IndexSet = std::vector<std::size_t>;

Vec3 centroid(const PointCloud& pc);

/// Centers on the centroid and scales the farthest point to unit norm. A cloud whose
/// points all coincide is only centered.
PointCloud normalize_unit_sphere(const PointCloud& pc);

/// Farthest point sampling. indices[0] == start; ties go to the lowest index.
IndexSet fps(const PointCloud& pc, std::size_t k, std::size_t start = 0);

/// For every query, the k nearest points of `pc` in ascending squared distance
/// (ties by lowest index).
std::vector<IndexSet> knn(const PointCloud& pc, const PointCloud& queries, std::size_t k);

/// Symmetric l2 Chamfer distance with squared norms, averaged per direction.
double chamfer_l2(const PointCloud& p, const PointCloud& q);

PointCloud select(const PointCloud& pc, std::span<const std::size_t> indices);
PointCloud transformed(const PointCloud& pc, const Mat3& rotation, const Vec3& translation = {});

// Point cloud files. Text: one "x y z" per line. Binary: little-endian uint64 count
// followed by count float32 triples.
PointCloud read_pointcloud_text(const std::filesystem::path& path);
PointCloud read_pointcloud_binary(const std::filesystem::path& path);
void write_pointcloud_text(const std::filesystem::path& path, const PointCloud& pc);
void write_pointcloud_binary(const std::filesystem::path& path, const PointCloud& pc);

} // namespace gspt
