#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "cseg/data/volume.hpp"

namespace cseg {

/// Reported Hausdorff value when exactly one of the two masks is empty, the
/// convention of the segmentation challenge's evaluation platform.
inline constexpr double kHd95EmptySentinel = 373.1287;

namespace detail {

inline void check_binary_pair(const std::vector<std::uint8_t>& pred,
                              const std::vector<std::uint8_t>& truth, const char* what) {
    check(pred.size() == truth.size(), std::string(what) + ": masks have " +
                                           std::to_string(pred.size()) + " and " +
                                           std::to_string(truth.size()) + " voxels");
    for (const std::uint8_t v : pred)
        check(v <= 1, std::string(what) + ": prediction mask must be binary");
    for (const std::uint8_t v : truth)
        check(v <= 1, std::string(what) + ": truth mask must be binary");
}

/// A mask voxel belongs to the surface when any of its six face neighbors is
/// outside the mask; a neighbor beyond the volume edge counts as outside.
/// Returned as (d, h, w) integer coordinates in raster order.
inline std::vector<std::array<std::ptrdiff_t, 3>> surface_voxels(
    const std::vector<std::uint8_t>& mask, const Dims3& dims) {
    const std::ptrdiff_t nd = std::ptrdiff_t(dims[0]);
    const std::ptrdiff_t nh = std::ptrdiff_t(dims[1]);
    const std::ptrdiff_t nw = std::ptrdiff_t(dims[2]);
    auto at = [&](std::ptrdiff_t d, std::ptrdiff_t h, std::ptrdiff_t w) -> bool {
        if (d < 0 || d >= nd || h < 0 || h >= nh || w < 0 || w >= nw) return false;
        return mask[std::size_t((d * nh + h) * nw + w)] != 0;
    };
    std::vector<std::array<std::ptrdiff_t, 3>> out;
    for (std::ptrdiff_t d = 0; d < nd; ++d)
        for (std::ptrdiff_t h = 0; h < nh; ++h)
            for (std::ptrdiff_t w = 0; w < nw; ++w) {
                if (!at(d, h, w)) continue;
                if (!at(d - 1, h, w) || !at(d + 1, h, w) || !at(d, h - 1, w) ||
                    !at(d, h + 1, w) || !at(d, h, w - 1) || !at(d, h, w + 1))
                    out.push_back({d, h, w});
            }
    return out;
}

/// Nearest-rank index (1-based) of the 95th percentile among n values,
/// computed in integer arithmetic: ceil(0.95 n) = ceil(19 n / 20).
inline std::size_t rank95(std::size_t n) { return (19 * n + 19) / 20; }

/// Directed 95th-percentile surface distance from each voxel of `from` to
/// the nearest voxel of `to`, in millimetres. `to` is consumed sorted by the
/// first coordinate so the slab bound |Δd|·sd can prune candidates; pruning
/// only skips pairs that cannot improve the running minimum, so the result
/// equals the plain all-pairs computation bit for bit.
inline double directed_percentile_distance(std::vector<std::array<std::ptrdiff_t, 3>> from,
                                           std::vector<std::array<std::ptrdiff_t, 3>> to,
                                           const std::array<float, 3>& spacing) {
    const double sd = double(spacing[0]), sh = double(spacing[1]), sw = double(spacing[2]);
    std::sort(to.begin(), to.end());
    std::vector<double> dists;
    dists.reserve(from.size());
    for (const auto& a : from) {
        // Start at the slab of equal first coordinate and walk outward.
        const auto mid = std::lower_bound(
            to.begin(), to.end(), a,
            [](const auto& x, const auto& y) { return x[0] < y[0]; });
        double best = std::numeric_limits<double>::infinity();
        auto consider = [&](const std::array<std::ptrdiff_t, 3>& b) {
            const double dd = double(a[0] - b[0]) * sd;
            const double dh = double(a[1] - b[1]) * sh;
            const double dw = double(a[2] - b[2]) * sw;
            const double sq = dd * dd + dh * dh + dw * dw;
            if (sq < best) best = sq;
        };
        for (auto it = mid; it != to.end(); ++it) {
            const double slab = double((*it)[0] - a[0]) * sd;
            if (slab * slab > best) break;
            consider(*it);
        }
        for (auto it = mid; it != to.begin();) {
            --it;
            const double slab = double(a[0] - (*it)[0]) * sd;
            if (slab * slab > best) break;
            consider(*it);
        }
        dists.push_back(std::sqrt(best));
    }
    std::sort(dists.begin(), dists.end());
    return dists[rank95(dists.size()) - 1];
}

}  // namespace detail

/// Binary overlap score 2|A∩B| / (|A| + |B|). Two empty masks agree
/// perfectly (1); one empty mask scores 0.
inline double dice_score(const std::vector<std::uint8_t>& pred,
                         const std::vector<std::uint8_t>& truth) {
    detail::check_binary_pair(pred, truth, "dice");
    std::size_t inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        inter += pred[i] & truth[i];
        a += pred[i];
        b += truth[i];
    }
    if (a + b == 0) return 1.0;
    return 2.0 * double(inter) / double(a + b);
}

/// 95th-percentile symmetric Hausdorff distance between mask surfaces in
/// millimetres: the larger of the two directed nearest-rank percentiles of
/// nearest-surface distances, with voxel centers scaled by the spacing.
/// Two empty masks score 0; exactly one empty mask yields the platform
/// sentinel kHd95EmptySentinel.
inline double hausdorff95(const std::vector<std::uint8_t>& pred,
                          const std::vector<std::uint8_t>& truth, const Dims3& dims,
                          const std::array<float, 3>& spacing = {1.0f, 1.0f, 1.0f}) {
    detail::check_binary_pair(pred, truth, "hd95");
    check(pred.size() == dims_voxels(dims),
          "hd95: masks hold " + std::to_string(pred.size()) + " voxels but the extents say " +
              dims_str(dims));
    for (const float s : spacing) check(s > 0.0f, "hd95: spacing must be positive");

    const auto sp = detail::surface_voxels(pred, dims);
    const auto st = detail::surface_voxels(truth, dims);
    if (sp.empty() && st.empty()) return 0.0;
    if (sp.empty() || st.empty()) return kHd95EmptySentinel;
    return std::max(detail::directed_percentile_distance(sp, st, spacing),
                    detail::directed_percentile_distance(st, sp, spacing));
}

/// Voxel confusion counts of a binary prediction against a binary truth.
struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline ConfusionCounts confusion_counts(const std::vector<std::uint8_t>& pred,
                                        const std::vector<std::uint8_t>& truth) {
    detail::check_binary_pair(pred, truth, "confusion");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (truth[i]) {
            ++(pred[i] ? c.tp : c.fn);
        } else {
            ++(pred[i] ? c.fp : c.tn);
        }
    }
    return c;
}

/// (TP/(TP+FN), TN/(TN+FP)). A vacuous denominator — no positive truth
/// voxels for sensitivity, no negative ones for specificity — scores 1:
/// there was nothing to detect (or to reject), so nothing was missed.
inline std::pair<double, double> sensitivity_specificity(
    const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
    const ConfusionCounts c = confusion_counts(pred, truth);
    const double sens = c.tp + c.fn == 0 ? 1.0 : double(c.tp) / double(c.tp + c.fn);
    const double spec = c.tn + c.fp == 0 ? 1.0 : double(c.tn) / double(c.tn + c.fp);
    return {sens, spec};
}

/// All four metrics plus the confusion counts for one region of one case.
struct RegionMetrics {
    double dice = 0.0;
    double hd95 = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    ConfusionCounts counts;
};

/// Per-case evaluation: one RegionMetrics per nested region.
struct RegionReport {
    std::string case_id;
    RegionMetrics wt, tc, et;
};

namespace detail {

inline RegionMetrics region_metrics(const std::vector<std::uint8_t>& pred,
                                    const std::vector<std::uint8_t>& truth, const Dims3& dims,
                                    const std::array<float, 3>& spacing) {
    RegionMetrics m;
    m.dice = dice_score(pred, truth);
    m.hd95 = hausdorff95(pred, truth, dims, spacing);
    std::tie(m.sensitivity, m.specificity) = sensitivity_specificity(pred, truth);
    m.counts = confusion_counts(pred, truth);
    return m;
}

}  // namespace detail

/// Decompose two label maps into their nested regions and score each one.
inline RegionReport evaluate_case(const LabelMap& pred, const LabelMap& truth,
                                  const std::array<float, 3>& spacing = {1.0f, 1.0f, 1.0f},
                                  const std::string& case_id = "") {
    check(pred.dims == truth.dims, "evaluate: prediction " + dims_str(pred.dims) +
                                       " vs truth " + dims_str(truth.dims));
    const RegionMasks p = encode_labels(pred);
    const RegionMasks t = encode_labels(truth);
    RegionReport r;
    r.case_id = case_id;
    r.wt = detail::region_metrics(p.wt, t.wt, pred.dims, spacing);
    r.tc = detail::region_metrics(p.tc, t.tc, pred.dims, spacing);
    r.et = detail::region_metrics(p.et, t.et, pred.dims, spacing);
    return r;
}

/// Mean and population standard deviation of one metric over a cohort.
struct MeanSd {
    double mean = 0.0;
    double sd = 0.0;
};

struct RegionAggregate {
    MeanSd dice, hd95, sensitivity, specificity;
};

/// Cohort summary in the shape of the results table: per region, mean and
/// SD of every metric.
struct Aggregate {
    std::size_t cases = 0;
    RegionAggregate wt, tc, et;
};

namespace detail {

inline MeanSd mean_sd(const std::vector<double>& xs) {
    MeanSd out;
    for (const double x : xs) out.mean += x;
    out.mean /= double(xs.size());
    double var = 0.0;
    for (const double x : xs) var += (x - out.mean) * (x - out.mean);
    out.sd = std::sqrt(var / double(xs.size()));
    return out;
}

inline RegionAggregate aggregate_region(const std::vector<RegionReport>& reports,
                                        const RegionMetrics RegionReport::* region) {
    std::vector<double> dice, hd, sens, spec;
    for (const auto& r : reports) {
        const RegionMetrics& m = r.*region;
        dice.push_back(m.dice);
        hd.push_back(m.hd95);
        sens.push_back(m.sensitivity);
        spec.push_back(m.specificity);
    }
    return {mean_sd(dice), mean_sd(hd), mean_sd(sens), mean_sd(spec)};
}

}  // namespace detail

inline Aggregate aggregate(const std::vector<RegionReport>& reports) {
    check(!reports.empty(), "aggregate: no reports");
    Aggregate a;
    a.cases = reports.size();
    a.wt = detail::aggregate_region(reports, &RegionReport::wt);
    a.tc = detail::aggregate_region(reports, &RegionReport::tc);
    a.et = detail::aggregate_region(reports, &RegionReport::et);
    return a;
}

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string fmt_cell(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

}  // namespace detail

/// One CSV row per case — metric columns in ET, WT, TC order, matching the
/// results-table layout — followed by cohort mean and SD rows. Values are
/// printed with enough digits to round-trip through double.
inline std::string metrics_csv(const std::vector<RegionReport>& reports) {
    check(!reports.empty(), "csv: no reports");
    std::string out =
        "case,dice_et,dice_wt,dice_tc,hd95_et,hd95_wt,hd95_tc,"
        "sensitivity_et,sensitivity_wt,sensitivity_tc,"
        "specificity_et,specificity_wt,specificity_tc\n";
    auto row = [&out](const std::string& id, const std::array<double, 12>& v) {
        out += id;
        for (const double x : v) out += "," + detail::fmt_double(x);
        out += "\n";
    };
    for (const auto& r : reports)
        row(r.case_id, {r.et.dice, r.wt.dice, r.tc.dice, r.et.hd95, r.wt.hd95, r.tc.hd95,
                        r.et.sensitivity, r.wt.sensitivity, r.tc.sensitivity,
                        r.et.specificity, r.wt.specificity, r.tc.specificity});
    const Aggregate a = aggregate(reports);
    row("mean", {a.et.dice.mean, a.wt.dice.mean, a.tc.dice.mean, a.et.hd95.mean,
                 a.wt.hd95.mean, a.tc.hd95.mean, a.et.sensitivity.mean, a.wt.sensitivity.mean,
                 a.tc.sensitivity.mean, a.et.specificity.mean, a.wt.specificity.mean,
                 a.tc.specificity.mean});
    row("sd", {a.et.dice.sd, a.wt.dice.sd, a.tc.dice.sd, a.et.hd95.sd, a.wt.hd95.sd,
               a.tc.hd95.sd, a.et.sensitivity.sd, a.wt.sensitivity.sd, a.tc.sensitivity.sd,
               a.et.specificity.sd, a.wt.specificity.sd, a.tc.specificity.sd});
    return out;
}

/// Human-readable cohort table: one row per metric, one "mean (sd)" cell per
/// region, regions in ET, WT, TC order.
inline std::string metrics_table(const Aggregate& a) {
    auto cell = [](const MeanSd& m) {
        return detail::fmt_cell(m.mean) + " (" + detail::fmt_cell(m.sd) + ")";
    };
    auto line = [&](const char* name, const MeanSd& et, const MeanSd& wt, const MeanSd& tc) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-15s %18s %18s %18s\n", name, cell(et).c_str(),
                      cell(wt).c_str(), cell(tc).c_str());
        return std::string(buf);
    };
    char head[160];
    std::snprintf(head, sizeof head, "%-15s %18s %18s %18s\n",
                  ("metric (n=" + std::to_string(a.cases) + ")").c_str(), "ET", "WT", "TC");
    std::string out = head;
    out += line("dice", a.et.dice, a.wt.dice, a.tc.dice);
    out += line("hd95 (mm)", a.et.hd95, a.wt.hd95, a.tc.hd95);
    out += line("sensitivity", a.et.sensitivity, a.wt.sensitivity, a.tc.sensitivity);
    out += line("specificity", a.et.specificity, a.wt.specificity, a.tc.specificity);
    return out;
}

}  // namespace cseg
