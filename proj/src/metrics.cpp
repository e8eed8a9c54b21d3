#include "esceme/metrics.hpp"

#include "esceme/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace esceme::metrics {

const std::array<std::string, 8>& MetricVector::names() {
    static const std::array<std::string, 8> n{"TL", "NE", "SR", "SPL", "CLS", "nDTW", "SDTW", "GP"};
    return n;
}

double MetricVector::get(const std::string& name) const {
    if (name == "TL") return tl;
    if (name == "NE") return ne;
    if (name == "SR") return sr;
    if (name == "SPL") return spl;
    if (name == "CLS") return cls;
    if (name == "nDTW") return ndtw;
    if (name == "SDTW") return sdtw;
    if (name == "GP") return gp;
    throw ConfigError("unknown metric " + name);
}

std::map<std::string, double> MetricVector::as_map() const {
    std::map<std::string, double> m;
    for (const auto& n : names()) m[n] = get(n);
    return m;
}

bool MetricVector::within_ranges() const {
    const bool sr_binary = sr == 0.0 || sr == 1.0;
    return tl >= 0.0 && ne >= 0.0 && sr_binary && spl >= 0.0 && spl <= 1.0 && spl <= sr && cls >= 0.0 && cls <= 1.0 &&
           ndtw > 0.0 && ndtw <= 1.0 && sdtw >= 0.0 && sdtw <= 1.0 && sdtw <= ndtw && sdtw <= sr &&
           (sr == 1.0 || sdtw == 0.0);
}

namespace {

void require_path(std::span<const ViewpointId> path, const char* what) {
    if (path.empty()) throw ConfigError(std::string(what) + " must contain at least one node");
}

std::vector<world::Vec2> positions(const Scene& scene, std::span<const ViewpointId> path) {
    std::vector<world::Vec2> out;
    out.reserve(path.size());
    for (auto v : path) out.push_back(scene.node(v).position);
    return out;
}

}  // namespace

double tl(const Scene& scene, std::span<const ViewpointId> path) {
    require_path(path, "trajectory");
    world::validate_route(scene, path);
    return world::path_length(scene, path);
}

double ne(const Scene& scene, std::span<const ViewpointId> path, ViewpointId goal) {
    require_path(path, "trajectory");
    return world::geodesic_distances(scene, goal)[static_cast<std::size_t>(path.back())];
}

double sr_from_error(double navigation_error, double radius) { return navigation_error < radius ? 1.0 : 0.0; }

double sr(const Scene& scene, std::span<const ViewpointId> path, ViewpointId goal, double radius) {
    return sr_from_error(ne(scene, path, goal), radius);
}

double spl(const Scene& scene, std::span<const ViewpointId> path, std::span<const ViewpointId> reference, double radius) {
    require_path(reference, "reference");
    const double success = sr(scene, path, reference.back(), radius);
    if (success == 0.0) return 0.0;
    const double shortest = world::geodesic_distances(scene, path.front())[static_cast<std::size_t>(reference.back())];
    const double taken = tl(scene, path);
    const double denom = std::max(shortest, taken);
    return denom > 0.0 ? success * shortest / denom : success;
}

double dtw(std::span<const world::Vec2> a, std::span<const world::Vec2> b) {
    if (a.empty() || b.empty()) throw ConfigError("dtw needs non-empty sequences");
    const double inf = std::numeric_limits<double>::infinity();
    const std::size_t n = a.size(), m = b.size();
    std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
    prev[0] = 0.0;
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = inf;
        for (std::size_t j = 1; j <= m; ++j) {
            const double cost = world::distance(a[i - 1], b[j - 1]);
            cur[j] = cost + std::min({prev[j], cur[j - 1], prev[j - 1]});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double ndtw(const Scene& scene, std::span<const ViewpointId> path, std::span<const ViewpointId> reference, double radius) {
    require_path(path, "trajectory");
    require_path(reference, "reference");
    const auto p = positions(scene, path);
    const auto r = positions(scene, reference);
    return std::exp(-dtw(p, r) / (static_cast<double>(r.size()) * radius));
}

double sdtw(const Scene& scene, std::span<const ViewpointId> path, std::span<const ViewpointId> reference, double radius) {
    return sr(scene, path, reference.back(), radius) * ndtw(scene, path, reference, radius);
}

double cls(const Scene& scene, std::span<const ViewpointId> path, std::span<const ViewpointId> reference, double radius) {
    require_path(path, "trajectory");
    require_path(reference, "reference");
    const auto p = positions(scene, path);
    const auto r = positions(scene, reference);
    double coverage = 0.0;
    for (const auto& rp : r) {
        double nearest = std::numeric_limits<double>::infinity();
        for (const auto& pp : p) nearest = std::min(nearest, world::distance(rp, pp));
        coverage += std::exp(-nearest / radius);
    }
    coverage /= static_cast<double>(r.size());
    const double expected = coverage * world::path_length(scene, reference);
    const double taken = tl(scene, path);
    const double denom = expected + std::abs(expected - taken);
    const double length_score = denom > 0.0 ? expected / denom : 1.0;
    return coverage * length_score;
}

double gp(const Scene& scene, std::span<const ViewpointId> path, std::span<const ViewpointId> reference) {
    require_path(path, "trajectory");
    require_path(reference, "reference");
    const auto dist = world::geodesic_distances(scene, reference.back());
    return dist[static_cast<std::size_t>(reference.front())] - dist[static_cast<std::size_t>(path.back())];
}

MetricVector evaluate(const Scene& scene, std::span<const ViewpointId> path, std::span<const ViewpointId> reference,
                      double radius) {
    MetricVector m;
    m.tl = tl(scene, path);
    m.ne = ne(scene, path, reference.back());
    m.sr = sr_from_error(m.ne, radius);
    m.spl = spl(scene, path, reference, radius);
    m.ndtw = ndtw(scene, path, reference, radius);
    m.sdtw = m.sr * m.ndtw;
    m.cls = cls(scene, path, reference, radius);
    m.gp = gp(scene, path, reference);
    return m;
}

double mean(std::span<const double> xs) {
    if (xs.empty()) return 0.0;
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

double sample_stddev(std::span<const double> xs) {
    if (xs.size() < 2) return 0.0;
    // Welford's update: identical inputs give exactly zero.
    double mu = 0.0, m2 = 0.0;
    std::size_t k = 0;
    for (double x : xs) {
        ++k;
        const double d = x - mu;
        mu += d / static_cast<double>(k);
        m2 += d * (x - mu);
    }
    return std::sqrt(m2 / static_cast<double>(xs.size() - 1));
}

Summary summarize(std::span<const MetricVector> rows) {
    Summary s;
    s.count = rows.size();
    for (const auto& name : MetricVector::names()) {
        std::vector<double> xs;
        xs.reserve(rows.size());
        for (const auto& r : rows) xs.push_back(r.get(name));
        // Sorting makes the aggregate independent of episode order.
        std::sort(xs.begin(), xs.end());
        s.mean[name] = mean(xs);
        s.stddev[name] = sample_stddev(xs);
    }
    return s;
}

}  // namespace esceme::metrics
