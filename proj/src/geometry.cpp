#include "gspt/geometry.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>

#include "binary_io.hpp"
#include "gspt/errors.hpp"

namespace gspt {

namespace {

void require_finite(const PointCloud& pc, const char* what) {
    for (std::size_t i = 0; i < pc.size(); ++i) {
        if (!is_finite(pc[i]))
            throw InvalidInput(std::string(what) + ": non-finite coordinate at point " + std::to_string(i));
    }
}

// Mean over `from` of the squared distance to the nearest point of `to`.
double directed_chamfer(const PointCloud& from, const PointCloud& to) {
    double total = 0.0;
    for (const auto& p : from.points) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to.points) best = std::min(best, squared_distance(p, q));
        total += best;
    }
    return total / static_cast<double>(from.size());
}

} // namespace

Vec3 centroid(const PointCloud& pc) {
    if (pc.empty()) throw InvalidArgument("centroid: empty point cloud");
    Vec3 c;
    for (const auto& p : pc.points) c += p;
    return c / static_cast<double>(pc.size());
}

PointCloud normalize_unit_sphere(const PointCloud& pc) {
    if (pc.empty()) throw InvalidInput("normalize_unit_sphere: empty point cloud");
    require_finite(pc, "normalize_unit_sphere");

    const Vec3 c = centroid(pc);
    double radius_sq = 0.0;
    for (const auto& p : pc.points) radius_sq = std::max(radius_sq, squared_distance(p, c));
    const double scale = radius_sq > 0.0 ? 1.0 / std::sqrt(radius_sq) : 1.0;

    PointCloud out;
    out.points.reserve(pc.size());
    for (const auto& p : pc.points) out.points.push_back((p - c) * scale);
    return out;
}

IndexSet fps(const PointCloud& pc, std::size_t k, std::size_t start) {
    if (k < 1 || k > pc.size())
        throw InvalidArgument("fps: k=" + std::to_string(k) + " must be in [1, " + std::to_string(pc.size()) + "]");
    if (start >= pc.size()) throw InvalidArgument("fps: start index out of range");

    IndexSet selected;
    selected.reserve(k);
    selected.push_back(start);

    std::vector<double> min_dist(pc.size(), std::numeric_limits<double>::infinity());
    std::vector<bool> taken(pc.size(), false);
    taken[start] = true;
    std::size_t last = start;
    while (selected.size() < k) {
        std::size_t best = 0;
        double best_dist = -1.0;
        for (std::size_t i = 0; i < pc.size(); ++i) {
            if (taken[i]) continue;
            min_dist[i] = std::min(min_dist[i], squared_distance(pc[i], pc[last]));
            // strict comparison keeps the lowest index on ties
            if (min_dist[i] > best_dist) {
                best_dist = min_dist[i];
                best = i;
            }
        }
        selected.push_back(best);
        taken[best] = true;
        last = best;
    }
    return selected;
}

std::vector<IndexSet> knn(const PointCloud& pc, const PointCloud& queries, std::size_t k) {
    if (k > pc.size())
        throw InvalidArgument("knn: k=" + std::to_string(k) + " exceeds point count " + std::to_string(pc.size()));

    std::vector<IndexSet> result;
    result.reserve(queries.size());
    std::vector<std::pair<double, std::size_t>> dist(pc.size());
    for (const auto& q : queries.points) {
        for (std::size_t i = 0; i < pc.size(); ++i) dist[i] = {squared_distance(pc[i], q), i};
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
        IndexSet row(k);
        for (std::size_t j = 0; j < k; ++j) row[j] = dist[j].second;
        result.push_back(std::move(row));
    }
    return result;
}

double chamfer_l2(const PointCloud& p, const PointCloud& q) {
    if (p.empty() || q.empty()) throw InvalidArgument("chamfer_l2: empty point cloud");
    return directed_chamfer(p, q) + directed_chamfer(q, p);
}

PointCloud select(const PointCloud& pc, std::span<const std::size_t> indices) {
    PointCloud out;
    out.points.reserve(indices.size());
    for (auto i : indices) {
        if (i >= pc.size()) throw InvalidArgument("select: index out of range");
        out.points.push_back(pc[i]);
    }
    return out;
}

PointCloud transformed(const PointCloud& pc, const Mat3& rotation, const Vec3& translation) {
    PointCloud out;
    out.points.reserve(pc.size());
    for (const auto& p : pc.points) out.points.push_back(rotation * p + translation);
    return out;
}

PointCloud read_pointcloud_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open " + path.string());

    PointCloud pc;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        Vec3 p;
        std::string extra;
        if (!(ls >> p.x >> p.y >> p.z) || (ls >> extra))
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected \"x y z\", got \"" + line + "\"",
                              line_no);
        if (!is_finite(p))
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": non-finite coordinate", line_no);
        pc.points.push_back(p);
    }
    if (pc.empty()) throw InvalidInput(path.string() + ": no points");
    return pc;
}

PointCloud read_pointcloud_binary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput("cannot open " + path.string());

    std::uint64_t count = 0;
    if (!detail::read_le(in, count)) throw InvalidInput(path.string() + ": missing count header");
    if (count == 0) throw InvalidInput(path.string() + ": no points");

    PointCloud pc;
    pc.points.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(count, 1u << 24)));
    for (std::uint64_t i = 0; i < count; ++i) {
        float xyz[3];
        for (float& c : xyz) {
            if (!detail::read_le(in, c))
                throw FormatError(path.string() + ": truncated at point " + std::to_string(i), 0, 8 + 12 * i);
        }
        Vec3 p{xyz[0], xyz[1], xyz[2]};
        if (!is_finite(p))
            throw FormatError(path.string() + ": non-finite coordinate at point " + std::to_string(i), 0, 8 + 12 * i);
        pc.points.push_back(p);
    }
    return pc;
}

void write_pointcloud_text(const std::filesystem::path& path, const PointCloud& pc) {
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot write " + path.string());
    out.precision(17);
    for (const auto& p : pc.points) out << p.x << ' ' << p.y << ' ' << p.z << '\n';
}

void write_pointcloud_binary(const std::filesystem::path& path, const PointCloud& pc) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidInput("cannot write " + path.string());
    detail::write_le<std::uint64_t>(out, pc.size());
    for (const auto& p : pc.points) {
        detail::write_le(out, static_cast<float>(p.x));
        detail::write_le(out, static_cast<float>(p.y));
        detail::write_le(out, static_cast<float>(p.z));
    }
}

} // namespace gspt
