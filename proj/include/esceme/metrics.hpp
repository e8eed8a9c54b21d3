#pragma once

#include "esceme/world.hpp"

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace esceme::metrics {

using world::Scene;
using world::ViewpointId;

inline constexpr double kSuccessRadius = 3.0;

struct MetricVector {
    double tl = 0.0;
    double ne = 0.0;
    double sr = 0.0;
    double spl = 0.0;
    double cls = 0.0;
    double ndtw = 0.0;
    double sdtw = 0.0;
    double gp = 0.0;

    // Names in reporting order.
    static const std::array<std::string, 8>& names();
    double get(const std::string& name) const;
    std::map<std::string, double> as_map() const;
    // Range and ordering invariants (SPL <= SR, SDTW <= min(SR, nDTW), ...).
    bool within_ranges() const;
};

// Sum of traversed edge lengths.
double tl(const Scene& scene, std::span<const ViewpointId> path);
// Geodesic distance from the stop node to the goal.
double ne(const Scene& scene, std::span<const ViewpointId> path, ViewpointId goal);
// 1 when the navigation error is strictly below the radius.
double sr_from_error(double navigation_error, double radius = kSuccessRadius);
double sr(const Scene& scene, std::span<const ViewpointId> path, ViewpointId goal, double radius = kSuccessRadius);
// SR * l / max(l, p), l = geodesic(start, goal), p = TL(path).
double spl(const Scene& scene, std::span<const ViewpointId> path, std::span<const ViewpointId> reference,
           double radius = kSuccessRadius);

// Classic DTW over euclidean point distances.
double dtw(std::span<const world::Vec2> a, std::span<const world::Vec2> b);
double ndtw(const Scene& scene, std::span<const ViewpointId> path, std::span<const ViewpointId> reference,
            double radius = kSuccessRadius);
double sdtw(const Scene& scene, std::span<const ViewpointId> path, std::span<const ViewpointId> reference,
            double radius = kSuccessRadius);
double cls(const Scene& scene, std::span<const ViewpointId> path, std::span<const ViewpointId> reference,
           double radius = kSuccessRadius);
// geodesic(start, goal) - geodesic(stop, goal)
double gp(const Scene& scene, std::span<const ViewpointId> path, std::span<const ViewpointId> reference);

MetricVector evaluate(const Scene& scene, std::span<const ViewpointId> path, std::span<const ViewpointId> reference,
                      double radius = kSuccessRadius);

struct Summary {
    std::map<std::string, double> mean;
    std::map<std::string, double> stddev;  // sample standard deviation
    std::size_t count = 0;
};

Summary summarize(std::span<const MetricVector> rows);

double mean(std::span<const double> xs);
double sample_stddev(std::span<const double> xs);

}  // namespace esceme::metrics
