#pragma once

// Optimal treatment regime estimation. Two routes: Q-learning with a
// linear Q-function Q(H,M) = b0 + b1 H + (b2 + b3 H1) M, and weighted
// classification of the IPW contrast via an axis-aligned tree grown to
// minimize weighted misclassification. Stratified-by-group fitting is
// the default.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cdsens/dataset.hpp"
#include "cdsens/error.hpp"
#include "cdsens/glm.hpp"
#include "cdsens/rule.hpp"

namespace cdsens {

struct ContrastVector {
    VectorXd values;      // C(Y, M, H) per unit
    VectorXi z_labels;    // I(value > 0)
    VectorXd abs_weights; // |value|
};

struct ValueEstimate {
    double value = 0.0;
    int compliant_count = 0;
    std::string method = "ipw-hajek";
};

struct ComplianceRow {
    std::string label;  // "reference", "comparison", "total"
    double recommendation_rate = 0.0;
    double compliance_rate = 0.0;
    int n = 0;
};

struct TreeParams {
    int max_depth = 3;
    // fraction of total |C| weight a leaf must retain; resolved to an
    // absolute weight at fit time
    double min_leaf_frac = 0.01;
    // subtract a main-effects fit of Y on (1, R, X, C) before building
    // the contrast; leaves E[C | H] unchanged but removes outcome-level
    // variation from the labels, sharpening the classification signal
    bool residualize = false;
};

namespace detail {

inline std::vector<int> group_rows(const Dataset& ds, int g) {
    std::vector<int> rows;
    for (int i = 0; i < ds.n; ++i)
        if (ds.r[i] == g) rows.push_back(i);
    return rows;
}

// design (1, [R], X, C) over the given rows; R included only when pooled
inline MatrixXd propensity_design(const Dataset& ds, const std::vector<int>& rows,
                                  bool include_r) {
    int p = 1 + (include_r ? 1 : 0) + ds.px() + ds.pc();
    MatrixXd d(static_cast<Eigen::Index>(rows.size()), p);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        int row = rows[i], col = 0;
        d(static_cast<Eigen::Index>(i), col++) = 1.0;
        if (include_r) d(static_cast<Eigen::Index>(i), col++) = ds.r[row];
        for (int j = 0; j < ds.px(); ++j) d(static_cast<Eigen::Index>(i), col++) = ds.x(row, j);
        for (int j = 0; j < ds.pc(); ++j) d(static_cast<Eigen::Index>(i), col++) = ds.c(row, j);
    }
    return d;
}

} // namespace detail

// P(M=1 | R, X, C), fit per group when stratified. Probabilities are
// clamped to [eps, 1-eps].
inline VectorXd fit_propensity(const Dataset& ds, bool stratify_by_group = true) {
    VectorXd p(ds.n);
    if (stratify_by_group) {
        for (int g = 0; g < 2; ++g) {
            std::vector<int> rows = detail::group_rows(ds, g);
            MatrixXd d = detail::propensity_design(ds, rows, false);
            VectorXi m(static_cast<Eigen::Index>(rows.size()));
            for (std::size_t i = 0; i < rows.size(); ++i) m[static_cast<Eigen::Index>(i)] = ds.m[rows[i]];
            LogisticFit fit = fit_logistic(d, m, VectorXd::Ones(d.rows()));
            VectorXd pg = predict_prob(fit, d);
            for (std::size_t i = 0; i < rows.size(); ++i) p[rows[i]] = pg[static_cast<Eigen::Index>(i)];
        }
    } else {
        std::vector<int> rows(static_cast<std::size_t>(ds.n));
        std::iota(rows.begin(), rows.end(), 0);
        MatrixXd d = detail::propensity_design(ds, rows, true);
        LogisticFit fit = fit_logistic(d, ds.m, VectorXd::Ones(ds.n));
        p = predict_prob(fit, d);
    }
    return p;
}

inline DecisionRule fit_qlearning(const Dataset& ds, bool stratify_by_group = true) {
    const std::string where = "otr.fit_qlearning";
    if (ds.h1_cols.empty()) throw Error(where, "h1_cols must be nonempty for Q-learning");

    auto fit_group = [&](const std::vector<int>& rows, bool include_r) -> LinearRule {
        int nh1 = static_cast<int>(ds.h1_cols.size());
        bool m0 = false, m1 = false;
        for (int row : rows) (ds.m[row] ? m1 : m0) = true;
        if (!m0 || !m1) throw Error(where, "single-arm stratum: both M=0 and M=1 required");
        // columns: 1, [R], X, C, M, M*H1
        int p = 1 + (include_r ? 1 : 0) + ds.px() + ds.pc() + 1 + nh1;
        MatrixXd d(static_cast<Eigen::Index>(rows.size()), p);
        VectorXd y(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            int row = rows[i], col = 0;
            Eigen::Index ii = static_cast<Eigen::Index>(i);
            d(ii, col++) = 1.0;
            if (include_r) d(ii, col++) = ds.r[row];
            for (int j = 0; j < ds.px(); ++j) d(ii, col++) = ds.x(row, j);
            for (int j = 0; j < ds.pc(); ++j) d(ii, col++) = ds.c(row, j);
            d(ii, col++) = ds.m[row];
            for (int k = 0; k < nh1; ++k)
                d(ii, col++) = ds.m[row] * ds.xc(row, ds.h1_cols[static_cast<std::size_t>(k)]);
            y[ii] = ds.y[row];
        }
        LinearFit fit = fit_wls(d, y, VectorXd::Ones(d.rows()));
        int m_col = 1 + (include_r ? 1 : 0) + ds.px() + ds.pc();
        LinearRule lr;
        lr.h1_cols = ds.h1_cols;
        lr.intercept = fit.coefficients[m_col];
        lr.coef = fit.coefficients.segment(m_col + 1, nh1);
        return lr;
    };

    DecisionRule rule;
    rule.kind = DecisionRule::Kind::Linear;
    rule.stratified = stratify_by_group;
    if (stratify_by_group) {
        rule.linear.push_back(fit_group(detail::group_rows(ds, 0), false));
        rule.linear.push_back(fit_group(detail::group_rows(ds, 1), false));
    } else {
        std::vector<int> rows(static_cast<std::size_t>(ds.n));
        std::iota(rows.begin(), rows.end(), 0);
        rule.linear.push_back(fit_group(rows, true));
    }
    return rule;
}

inline ContrastVector compute_contrast(const Dataset& ds, const VectorXd& propensity) {
    if (propensity.size() != ds.n)
        throw Error("otr.compute_contrast", "propensity length mismatch");
    ContrastVector cv;
    cv.values.resize(ds.n);
    cv.z_labels.resize(ds.n);
    cv.abs_weights.resize(ds.n);
    for (int i = 0; i < ds.n; ++i) {
        double p = propensity[i];
        double v = ds.m[i] ? ds.y[i] / p : -ds.y[i] / (1.0 - p);
        cv.values[i] = v;
        cv.z_labels[i] = v > 0.0 ? 1 : 0;
        cv.abs_weights[i] = std::fabs(v);
    }
    return cv;
}

namespace detail {

struct SplitChoice {
    bool found = false;
    int feature = -1;
    double threshold = 0.0;
    double error = std::numeric_limits<double>::infinity();
};

// weighted majority label; ties go to 0
inline int majority_label(const std::vector<int>& units, const VectorXi& z,
                          const VectorXd& w) {
    double w1 = 0.0, w0 = 0.0;
    for (int u : units) (z[u] ? w1 : w0) += w[u];
    return w1 > w0 ? 1 : 0;
}

inline double leaf_error(const std::vector<int>& units, const VectorXi& z,
                         const VectorXd& w, int label) {
    double e = 0.0;
    for (int u : units)
        if (z[u] != label) e += w[u];
    return e;
}

// Per-fit acceleration structure: every history feature sorted once over
// all rows, plus a generation-stamped membership mask so node subsets can
// be swept in sorted order without re-sorting or clearing.
struct SplitCache {
    std::vector<std::vector<int>> order;  // order[f] = row indices sorted by feature f
    mutable std::vector<int> stamp;
    mutable int gen = 0;
};

inline SplitCache make_split_cache(const Dataset& ds) {
    SplitCache cache;
    int nf = history_dim(ds);
    cache.order.resize(static_cast<std::size_t>(nf));
    cache.stamp.assign(static_cast<std::size_t>(ds.n), 0);
    for (int f = 0; f < nf; ++f) {
        std::vector<int>& ord = cache.order[static_cast<std::size_t>(f)];
        ord.resize(static_cast<std::size_t>(ds.n));
        std::iota(ord.begin(), ord.end(), 0);
        std::stable_sort(ord.begin(), ord.end(), [&](int a, int b) {
            return history_value(ds, a, f) < history_value(ds, b, f);
        });
    }
    return cache;
}

// Best single axis-aligned split by weighted 0-1 loss. Candidate
// thresholds are midpoints between consecutive sorted unique feature
// values; ties broken by (lowest feature index, smallest threshold).
inline SplitChoice best_single_split(const Dataset& ds, const SplitCache& cache,
                                     const std::vector<int>& units, const VectorXi& z,
                                     const VectorXd& w, double min_leaf_weight) {
    SplitChoice best;
    int nf = history_dim(ds);
    double tw0 = 0.0, tw1 = 0.0;
    for (int u : units) (z[u] ? tw1 : tw0) += w[u];
    int gen = ++cache.gen;
    for (int u : units) cache.stamp[static_cast<std::size_t>(u)] = gen;
    for (int f = 0; f < nf; ++f) {
        double lw0 = 0.0, lw1 = 0.0;
        bool have_prev = false;
        double prev_val = 0.0;
        for (int u : cache.order[static_cast<std::size_t>(f)]) {
            if (cache.stamp[static_cast<std::size_t>(u)] != gen) continue;
            double v = history_value(ds, u, f);
            if (have_prev && v != prev_val) {
                double thr = 0.5 * (prev_val + v);
                double lw = lw0 + lw1, rw = (tw0 + tw1) - lw;
                if (lw >= min_leaf_weight && rw >= min_leaf_weight) {
                    // child errors under their own majority labels
                    double err = std::min(lw0, lw1) + std::min(tw0 - lw0, tw1 - lw1);
                    if (err < best.error - 1e-12) {
                        best.found = true;
                        best.feature = f;
                        best.threshold = thr;
                        best.error = err;
                    }
                }
            }
            (z[u] ? lw1 : lw0) += w[u];
            have_prev = true;
            prev_val = v;
        }
    }
    return best;
}

inline void partition(const Dataset& ds, const std::vector<int>& units, int feature,
                      double threshold, std::vector<int>& left, std::vector<int>& right) {
    left.clear();
    right.clear();
    for (int u : units)
        (history_value(ds, u, feature) > threshold ? right : left).push_back(u);
}

// minimal loss achievable on `units` with at most one further split
inline double best_loss_depth1(const Dataset& ds, const SplitCache& cache,
                               const std::vector<int>& units, const VectorXi& z,
                               const VectorXd& w, double min_leaf_weight) {
    double leaf = leaf_error(units, z, w, majority_label(units, z, w));
    SplitChoice s = best_single_split(ds, cache, units, z, w, min_leaf_weight);
    return s.found ? std::min(leaf, s.error) : leaf;
}

inline int grow_tree(const Dataset& ds, const SplitCache& cache,
                     const std::vector<int>& units, const VectorXi& z, const VectorXd& w,
                     int depth, int max_depth, double min_leaf_weight,
                     std::vector<TreeNode>& nodes);

// Exact two-level optimization: choose the root split minimizing the
// total loss after optimally splitting each child once. Used whenever
// the remaining depth budget is <= 2; deeper recursion is greedy.
inline int grow_exact2(const Dataset& ds, const SplitCache& cache,
                       const std::vector<int>& units, const VectorXi& z, const VectorXd& w,
                       double min_leaf_weight, std::vector<TreeNode>& nodes) {
    int self = static_cast<int>(nodes.size());
    nodes.emplace_back();
    int label = majority_label(units, z, w);
    nodes[static_cast<std::size_t>(self)].label = label;
    double node_err = leaf_error(units, z, w, label);
    if (node_err <= 0.0) return self;

    double tw = 0.0;
    for (int u : units) tw += w[u];

    SplitChoice best;  // best root by exact two-level loss
    int nf = history_dim(ds);
    std::vector<int> sorted_members, lu, ru;
    for (int f = 0; f < nf; ++f) {
        // members in feature-f sorted order; left children of candidate
        // root splits are exactly the prefixes ending at value boundaries
        int gen = ++cache.gen;
        for (int u : units) cache.stamp[static_cast<std::size_t>(u)] = gen;
        sorted_members.clear();
        for (int u : cache.order[static_cast<std::size_t>(f)])
            if (cache.stamp[static_cast<std::size_t>(u)] == gen) sorted_members.push_back(u);
        double lw = 0.0;
        for (std::size_t i = 0; i + 1 < sorted_members.size(); ++i) {
            lw += w[sorted_members[i]];
            double vi = history_value(ds, sorted_members[i], f);
            double vn = history_value(ds, sorted_members[i + 1], f);
            if (vi == vn) continue;
            if (lw < min_leaf_weight || tw - lw < min_leaf_weight) continue;
            double thr = 0.5 * (vi + vn);
            lu.assign(sorted_members.begin(),
                      sorted_members.begin() + static_cast<std::ptrdiff_t>(i + 1));
            ru.assign(sorted_members.begin() + static_cast<std::ptrdiff_t>(i + 1),
                      sorted_members.end());
            double err = best_loss_depth1(ds, cache, lu, z, w, min_leaf_weight) +
                         best_loss_depth1(ds, cache, ru, z, w, min_leaf_weight);
            if (err < best.error - 1e-12) {
                best.found = true;
                best.feature = f;
                best.threshold = thr;
                best.error = err;
            }
        }
    }
    if (!best.found || best.error >= node_err - 1e-12) return self;

    // prefer the plain one-level split when it already ties the optimum
    SplitChoice single = best_single_split(ds, cache, units, z, w, min_leaf_weight);
    if (single.found && single.error <= best.error + 1e-12) best = single;

    partition(ds, units, best.feature, best.threshold, lu, ru);
    nodes[static_cast<std::size_t>(self)].feature = best.feature;
    nodes[static_cast<std::size_t>(self)].threshold = best.threshold;
    nodes[static_cast<std::size_t>(self)].label = -1;
    int l = grow_tree(ds, cache, lu, z, w, 0, 1, min_leaf_weight, nodes);
    int r = grow_tree(ds, cache, ru, z, w, 0, 1, min_leaf_weight, nodes);
    nodes[static_cast<std::size_t>(self)].left = l;
    nodes[static_cast<std::size_t>(self)].right = r;
    return self;
}

// Recursive partitioning minimizing weighted 0-1 loss. Depth budgets of
// two or less are solved exactly; deeper nodes split greedily.
inline int grow_tree(const Dataset& ds, const SplitCache& cache,
                     const std::vector<int>& units, const VectorXi& z, const VectorXd& w,
                     int depth, int max_depth, double min_leaf_weight,
                     std::vector<TreeNode>& nodes) {
    int budget = max_depth - depth;
    if (budget == 2) return grow_exact2(ds, cache, units, z, w, min_leaf_weight, nodes);

    int self = static_cast<int>(nodes.size());
    nodes.emplace_back();
    int label = majority_label(units, z, w);
    nodes[static_cast<std::size_t>(self)].label = label;
    double node_err = leaf_error(units, z, w, label);
    if (budget <= 0 || node_err <= 0.0) return self;

    SplitChoice best = best_single_split(ds, cache, units, z, w, min_leaf_weight);
    if (!best.found || best.error >= node_err - 1e-12) return self;

    std::vector<int> lu, ru;
    partition(ds, units, best.feature, best.threshold, lu, ru);
    nodes[static_cast<std::size_t>(self)].feature = best.feature;
    nodes[static_cast<std::size_t>(self)].threshold = best.threshold;
    nodes[static_cast<std::size_t>(self)].label = -1;
    int l = grow_tree(ds, cache, lu, z, w, depth + 1, max_depth, min_leaf_weight, nodes);
    int r = grow_tree(ds, cache, ru, z, w, depth + 1, max_depth, min_leaf_weight, nodes);
    nodes[static_cast<std::size_t>(self)].left = l;
    nodes[static_cast<std::size_t>(self)].right = r;
    return self;
}

// convenience overload: builds the sort cache internally
inline int grow_tree(const Dataset& ds, const std::vector<int>& units, const VectorXi& z,
                     const VectorXd& w, int depth, int max_depth, double min_leaf_weight,
                     std::vector<TreeNode>& nodes) {
    SplitCache cache = make_split_cache(ds);
    return grow_tree(ds, cache, units, z, w, depth, max_depth, min_leaf_weight, nodes);
}

} // namespace detail

inline DecisionRule fit_weighting_rule(const Dataset& ds, const TreeParams& params = {},
                                       bool stratify_by_group = true) {
    const std::string where = "otr.fit_weighting_rule";
    if (params.max_depth < 1) throw Error(where, "max_depth must be >= 1");
    VectorXd p = fit_propensity(ds, stratify_by_group);
    ContrastVector cv;
    if (params.residualize) {
        int n = ds.n;
        int k = 2 + static_cast<int>(ds.x.cols()) + static_cast<int>(ds.c.cols());
        MatrixXd design(n, k);
        for (int i = 0; i < n; ++i) {
            int col = 0;
            design(i, col++) = 1.0;
            design(i, col++) = static_cast<double>(ds.r[i]);
            for (int j = 0; j < ds.x.cols(); ++j) design(i, col++) = ds.x(i, j);
            for (int j = 0; j < ds.c.cols(); ++j) design(i, col++) = ds.c(i, j);
        }
        LinearFit fit = fit_wls(design, ds.y, VectorXd::Ones(n));
        Dataset centered = ds;
        centered.y = ds.y - design * fit.coefficients;
        cv = compute_contrast(centered, p);
    } else {
        cv = compute_contrast(ds, p);
    }
    double total_w = cv.abs_weights.sum();
    if (total_w <= 0.0) throw Error(where, "all contrast weights are zero");

    detail::SplitCache cache = detail::make_split_cache(ds);
    auto fit_group = [&](const std::vector<int>& units) -> TreeRule {
        double gw = 0.0;
        for (int u : units) gw += cv.abs_weights[u];
        double min_leaf = params.min_leaf_frac * gw;
        TreeRule tr;
        detail::grow_tree(ds, cache, units, cv.z_labels, cv.abs_weights, 0,
                          params.max_depth, min_leaf, tr.nodes);
        return tr;
    };

    DecisionRule rule;
    rule.kind = DecisionRule::Kind::Tree;
    rule.stratified = stratify_by_group;
    if (stratify_by_group) {
        rule.tree.push_back(fit_group(detail::group_rows(ds, 0)));
        rule.tree.push_back(fit_group(detail::group_rows(ds, 1)));
    } else {
        std::vector<int> units(static_cast<std::size_t>(ds.n));
        std::iota(units.begin(), units.end(), 0);
        rule.tree.push_back(fit_group(units));
    }
    return rule;
}

inline VectorXi apply_rule(const DecisionRule& rule, const Dataset& ds) {
    return rule.apply(ds);
}

// Hajek IPW value estimate over rule-compliant units, with p_i the
// probability of the observed arm.
inline ValueEstimate estimate_value(const Dataset& ds, const DecisionRule& rule,
                                    const VectorXd& propensity) {
    const std::string where = "otr.estimate_value";
    if (propensity.size() != ds.n) throw Error(where, "propensity length mismatch");
    VectorXi d = rule.apply(ds);
    double num = 0.0, den = 0.0;
    int count = 0;
    for (int i = 0; i < ds.n; ++i) {
        if (ds.m[i] != d[i]) continue;
        double p_obs = ds.m[i] ? propensity[i] : 1.0 - propensity[i];
        num += ds.y[i] / p_obs;
        den += 1.0 / p_obs;
        ++count;
    }
    if (count == 0) throw Error(where, "no unit complies with the rule");
    ValueEstimate v;
    v.value = num / den;
    v.compliant_count = count;
    return v;
}

inline std::vector<ComplianceRow> compliance_stats(const Dataset& ds,
                                                   const DecisionRule& rule) {
    VectorXi d = rule.apply(ds);
    auto row_for = [&](int g, const std::string& label) {
        ComplianceRow row;
        row.label = label;
        double rec = 0.0, comp = 0.0;
        for (int i = 0; i < ds.n; ++i) {
            if (g >= 0 && ds.r[i] != g) continue;
            ++row.n;
            rec += d[i];
            comp += (ds.m[i] == d[i]);
        }
        if (row.n > 0) {
            row.recommendation_rate = rec / row.n;
            row.compliance_rate = comp / row.n;
        }
        return row;
    };
    return {row_for(0, "reference"), row_for(1, "comparison"), row_for(-1, "total")};
}

} // namespace cdsens
