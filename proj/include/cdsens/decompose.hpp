#pragma once

// Causal decomposition estimators: initial disparity (difference in
// expected outcome between groups at fixed allowable covariates),
// disparity remaining under the rule (ICDE), and disparity
// reduction/remaining from equalizing compliance rates (IIE), by both
// regression and weighting routes, with stratified bootstrap SEs.
// Datasets are assumed already centered at the chosen c_center.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cdsens/dataset.hpp"
#include "cdsens/error.hpp"
#include "cdsens/glm.hpp"
#include "cdsens/otr.hpp"
#include "cdsens/parallel.hpp"
#include "cdsens/rng.hpp"
#include "cdsens/rule.hpp"

namespace cdsens {

enum class IieEstimator { Regression, Weighting };

struct DecomposeOptions {
    IieEstimator estimator = IieEstimator::Regression;
    bool interaction = false;            // include R x I(M=d) in the IIE outcome model
    bool stratify_propensity = true;
    bool am_mean_comparison_only = false; // plug-in E[Am] over comparison group instead of full sample
    std::optional<std::pair<double, double>> weight_truncation;  // percentile [lo, hi]
    bool refit_rule_in_bootstrap = false;
    int bootstrap_reps = 200;
};

struct EstimateSE {
    double est = 0.0;
    double se = std::numeric_limits<double>::quiet_NaN();
    // reference-distribution degrees of freedom for interval construction;
    // finite only for estimates pooled over simulation draws, where the
    // between-draw variance is estimated from few draws and a Student t
    // reference replaces the normal one
    double df = std::numeric_limits<double>::infinity();
};

struct DecompositionReport {
    EstimateSE tau, zeta_icde, delta_iie, zeta_iie;
    double pct_reduction_icde = 0.0;
    double pct_reduction_iie = 0.0;
    std::string estimator;
    bool interaction_included = false;
    VectorXd c_center;
    int bootstrap_failures = 0;
};

inline std::string significance_stars(double est, double se) {
    if (!(se > 0.0) || !std::isfinite(se)) return "";
    double z = std::fabs(est / se);
    if (z > 3.290526731) return "***";  // 0.001
    if (z > 2.575829304) return "**";   // 0.01
    if (z > 1.959963985) return "*";    // 0.05
    return "";
}

namespace detail {

// probability of the observed arm
inline double p_observed(const Dataset& ds, int i, const VectorXd& propensity) {
    return ds.m[i] ? propensity[i] : 1.0 - propensity[i];
}

inline void truncate_weights(VectorXd& w, std::optional<std::pair<double, double>> q) {
    if (!q) return;
    std::vector<double> sorted(w.data(), w.data() + w.size());
    std::sort(sorted.begin(), sorted.end());
    auto quantile = [&](double p) {
        double idx = p * (static_cast<double>(sorted.size()) - 1.0);
        std::size_t lo = static_cast<std::size_t>(idx);
        std::size_t hi = std::min(lo + 1, sorted.size() - 1);
        double frac = idx - static_cast<double>(lo);
        return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
    };
    double lo = quantile(q->first), hi = quantile(q->second);
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = std::min(std::max(w[i], lo), hi);
}

// design (1, R, C)
inline MatrixXd msm_design(const Dataset& ds) {
    MatrixXd d(ds.n, 2 + ds.pc());
    for (int i = 0; i < ds.n; ++i) {
        d(i, 0) = 1.0;
        d(i, 1) = ds.r[i];
        for (int j = 0; j < ds.pc(); ++j) d(i, 2 + j) = ds.c(i, j);
    }
    return d;
}

} // namespace detail

// coefficient of R in the weighted regression of Y on (1, R, C)
inline LinearFit fit_disparity_msm(const Dataset& ds, const VectorXd& w) {
    return fit_wls(detail::msm_design(ds), ds.y, w);
}

inline double estimate_initial_disparity(const Dataset& ds) {
    return fit_disparity_msm(ds, VectorXd::Ones(ds.n)).coefficients[1];
}

inline double estimate_icde(const Dataset& ds, const DecisionRule& rule,
                            const VectorXd& propensity,
                            const DecomposeOptions& opts = {}) {
    const std::string where = "decompose.estimate_icde";
    VectorXi d = rule.apply(ds);
    VectorXd w(ds.n);
    int compliant[2] = {0, 0};
    for (int i = 0; i < ds.n; ++i) {
        bool comp = ds.m[i] == d[i];
        w[i] = comp ? 1.0 / detail::p_observed(ds, i, propensity) : 0.0;
        if (comp) ++compliant[ds.r[i]];
    }
    if (compliant[0] == 0 || compliant[1] == 0)
        throw Error(where, "no rule-compliant unit in one group");
    detail::truncate_weights(w, opts.weight_truncation);
    return fit_disparity_msm(ds, w).coefficients[1];
}

struct IieEstimates {
    double delta = 0.0;
    double zeta = 0.0;
};

inline IieEstimates estimate_iie_regression(const Dataset& ds, const DecisionRule& rule,
                                            const VectorXd& propensity,
                                            const DecomposeOptions& opts = {}) {
    const std::string where = "decompose.estimate_iie_regression";
    VectorXi d = rule.apply(ds);
    VectorXi comp(ds.n);
    for (int i = 0; i < ds.n; ++i) comp[i] = (ds.m[i] == d[i]) ? 1 : 0;
    bool any0 = false, any1 = false;
    for (int i = 0; i < ds.n; ++i) (comp[i] ? any1 : any0) = true;
    if (!any0 || !any1) throw Error(where, "compliance indicator is degenerate");

    // compliance model: I(M=d) ~ (1, R, Am)
    int nam = static_cast<int>(ds.am_cols.size());
    MatrixXd cd(ds.n, 2 + nam);
    for (int i = 0; i < ds.n; ++i) {
        cd(i, 0) = 1.0;
        cd(i, 1) = ds.r[i];
        for (int k = 0; k < nam; ++k) cd(i, 2 + k) = ds.xc(i, ds.am_cols[static_cast<std::size_t>(k)]);
    }
    LogisticFit phi = fit_logistic(cd, comp, VectorXd::Ones(ds.n));

    // weighted outcome model: Y ~ (1, R, I(M=d), C, [R*I(M=d)]), weights 1/P(obs arm)
    VectorXd w(ds.n);
    for (int i = 0; i < ds.n; ++i) w[i] = 1.0 / detail::p_observed(ds, i, propensity);
    detail::truncate_weights(w, opts.weight_truncation);
    int p = 3 + ds.pc() + (opts.interaction ? 1 : 0);
    MatrixXd od(ds.n, p);
    for (int i = 0; i < ds.n; ++i) {
        od(i, 0) = 1.0;
        od(i, 1) = ds.r[i];
        od(i, 2) = comp[i];
        for (int j = 0; j < ds.pc(); ++j) od(i, 3 + j) = ds.c(i, j);
        if (opts.interaction) od(i, p - 1) = ds.r[i] * comp[i];
    }
    LinearFit lambda = fit_wls(od, ds.y, w);

    // plug-in E[Am]
    double am_term1 = 0.0, am_term0 = 0.0;
    if (nam > 0) {
        double cnt = 0.0;
        VectorXd am_mean = VectorXd::Zero(nam);
        for (int i = 0; i < ds.n; ++i) {
            if (opts.am_mean_comparison_only && ds.r[i] != 1) continue;
            for (int k = 0; k < nam; ++k)
                am_mean[k] += ds.xc(i, ds.am_cols[static_cast<std::size_t>(k)]);
            cnt += 1.0;
        }
        am_mean /= cnt;
        for (int k = 0; k < nam; ++k) {
            am_term1 += phi.coefficients[2 + k] * am_mean[k];
            am_term0 += phi.coefficients[2 + k] * am_mean[k];
        }
    }
    double p1 = expit(phi.coefficients[0] + phi.coefficients[1] + am_term1);
    double p0 = expit(phi.coefficients[0] + am_term0);
    double effect = lambda.coefficients[2] + (opts.interaction ? lambda.coefficients[p - 1] : 0.0);

    IieEstimates out;
    out.delta = (p1 - p0) * effect;
    out.zeta = estimate_initial_disparity(ds) - out.delta;
    return out;
}

inline IieEstimates estimate_iie_weighting(const Dataset& ds, const DecisionRule& rule,
                                           const VectorXd& propensity,
                                           const DecomposeOptions& opts = {}) {
    const std::string where = "decompose.estimate_iie_weighting";
    VectorXi d = rule.apply(ds);

    // compliance rate among the reference group given Am
    int nam = static_cast<int>(ds.am_cols.size());
    double pi1;  // P(I(M=d) = 1 | R=0, Am), averaged over the plug-in population
    if (nam == 0) {
        double s = 0.0, cnt = 0.0;
        for (int i = 0; i < ds.n; ++i) {
            if (ds.r[i] != 0) continue;
            s += (ds.m[i] == d[i]);
            cnt += 1.0;
        }
        if (cnt == 0.0) throw Error(where, "reference group is empty");
        pi1 = s / cnt;
    } else {
        std::vector<int> ref_rows;
        for (int i = 0; i < ds.n; ++i)
            if (ds.r[i] == 0) ref_rows.push_back(i);
        MatrixXd cd(static_cast<Eigen::Index>(ref_rows.size()), 1 + nam);
        VectorXi comp(static_cast<Eigen::Index>(ref_rows.size()));
        for (std::size_t i = 0; i < ref_rows.size(); ++i) {
            cd(static_cast<Eigen::Index>(i), 0) = 1.0;
            for (int k = 0; k < nam; ++k)
                cd(static_cast<Eigen::Index>(i), 1 + k) = ds.xc(ref_rows[i], ds.am_cols[static_cast<std::size_t>(k)]);
            comp[static_cast<Eigen::Index>(i)] = (ds.m[ref_rows[i]] == d[ref_rows[i]]) ? 1 : 0;
        }
        LogisticFit fit = fit_logistic(cd, comp, VectorXd::Ones(cd.rows()));
        double s = 0.0, cnt = 0.0;
        for (int i = 0; i < ds.n; ++i) {
            if (opts.am_mean_comparison_only && ds.r[i] != 1) continue;
            double eta = fit.coefficients[0];
            for (int k = 0; k < nam; ++k)
                eta += fit.coefficients[1 + k] * ds.xc(i, ds.am_cols[static_cast<std::size_t>(k)]);
            s += expit(eta);
            cnt += 1.0;
        }
        pi1 = s / cnt;
    }

    // Hajek means of Y among comparison units matching each weighted arm
    double hajek[2];
    for (int theta = 0; theta <= 1; ++theta) {
        double num = 0.0, den = 0.0;
        for (int i = 0; i < ds.n; ++i) {
            if (ds.r[i] != 1) continue;
            int target = theta ? d[i] : 1 - d[i];
            if (ds.m[i] != target) continue;
            double wi = 1.0 / detail::p_observed(ds, i, propensity);
            num += wi * ds.y[i];
            den += wi;
        }
        double pi_theta = theta ? pi1 : 1.0 - pi1;
        if (den == 0.0) {
            if (pi_theta > 0.0)
                throw Error(where, "no comparison-group unit in the theta=" +
                                       std::to_string(theta) + " weighted arm");
            hajek[theta] = 0.0;
        } else {
            hajek[theta] = num / den;
        }
    }
    double mixed = pi1 * hajek[1] + (1.0 - pi1) * hajek[0];

    // model-based E[Y | R, c] from the unweighted (1, R, C) regression
    LinearFit base = fit_disparity_msm(ds, VectorXd::Ones(ds.n));
    double ey_r1 = base.coefficients[0] + base.coefficients[1];
    double ey_r0 = base.coefficients[0];

    IieEstimates out;
    out.delta = ey_r1 - mixed;
    out.zeta = mixed - ey_r0;
    return out;
}

// One full decomposition pass; returns (tau, zeta_icde, delta_iie, zeta_iie).
inline Eigen::Vector4d decomposition_point_estimates(const Dataset& ds,
                                                     const DecisionRule& rule,
                                                     const DecomposeOptions& opts = {}) {
    VectorXd p = fit_propensity(ds, opts.stratify_propensity);
    double tau = estimate_initial_disparity(ds);
    double zicde = estimate_icde(ds, rule, p, opts);
    IieEstimates iie = opts.estimator == IieEstimator::Regression
                           ? estimate_iie_regression(ds, rule, p, opts)
                           : estimate_iie_weighting(ds, rule, p, opts);
    return {tau, zicde, iie.delta, iie.zeta};
}

struct BootstrapResult {
    VectorXd se;
    int failures = 0;
    int completed = 0;
};

// Nonparametric bootstrap, resampling units with replacement stratified
// by R so group sizes are preserved. Deterministic given seed; replicate
// k always draws from substream k regardless of worker count.
inline BootstrapResult bootstrap_se(const Dataset& ds,
                                    const std::function<VectorXd(const Dataset&)>& estimator,
                                    int B, std::uint64_t seed, int workers = 1) {
    const std::string where = "decompose.bootstrap_se";
    if (B < 2) throw Error(where, "B must be >= 2");
    std::vector<int> ref_rows, cmp_rows;
    for (int i = 0; i < ds.n; ++i) (ds.r[i] == 0 ? ref_rows : cmp_rows).push_back(i);

    std::vector<std::optional<VectorXd>> reps(static_cast<std::size_t>(B));
    parallel_for(static_cast<std::size_t>(B), workers, [&](std::size_t b) {
        Rng rng(derive_seed(seed, 0xb007u, b));
        std::vector<int> rows;
        rows.reserve(static_cast<std::size_t>(ds.n));
        for (std::size_t k = 0; k < ref_rows.size(); ++k)
            rows.push_back(ref_rows[rng.below(ref_rows.size())]);
        for (std::size_t k = 0; k < cmp_rows.size(); ++k)
            rows.push_back(cmp_rows[rng.below(cmp_rows.size())]);
        try {
            reps[b] = estimator(ds.subset(rows));
        } catch (const Error&) {
            reps[b] = std::nullopt;
        }
    });

    BootstrapResult out;
    Eigen::Index dim = -1;
    for (const auto& rep : reps)
        if (rep) { dim = rep->size(); break; }
    if (dim < 0) throw Error(where, "all bootstrap replicates failed");
    VectorXd mean = VectorXd::Zero(dim), m2 = VectorXd::Zero(dim);
    double cnt = 0.0;
    for (const auto& rep : reps) {  // fixed index order => deterministic moments
        if (!rep) { ++out.failures; continue; }
        cnt += 1.0;
        VectorXd delta = *rep - mean;
        mean += delta / cnt;
        m2 += delta.cwiseProduct(*rep - mean);
    }
    out.completed = static_cast<int>(cnt);
    if (out.failures > B / 5)
        throw Error(where, std::to_string(out.failures) + " of " + std::to_string(B) +
                               " bootstrap replicates failed (> 20%)");
    out.se = (m2 / (cnt - 1.0)).cwiseSqrt();
    return out;
}

// Full decomposition report with bootstrap standard errors. The rule is
// held fixed across replicates unless opts.refit_rule_in_bootstrap is
// set, in which case rule_refitter must rebuild it from resampled data.
inline DecompositionReport run_decomposition(
    const Dataset& ds, const DecisionRule& rule, const DecomposeOptions& opts,
    std::uint64_t seed, int workers = 1,
    const std::function<DecisionRule(const Dataset&)>& rule_refitter = {}) {
    Eigen::Vector4d point = decomposition_point_estimates(ds, rule, opts);
    DecompositionReport rep;
    rep.tau.est = point[0];
    rep.zeta_icde.est = point[1];
    rep.delta_iie.est = point[2];
    rep.zeta_iie.est = point[3];
    if (opts.bootstrap_reps >= 2) {
        auto rep_estimator = [&](const Dataset& bds) -> VectorXd {
            if (opts.refit_rule_in_bootstrap && rule_refitter)
                return decomposition_point_estimates(bds, rule_refitter(bds), opts);
            return decomposition_point_estimates(bds, rule, opts);
        };
        BootstrapResult boot =
            bootstrap_se(ds, rep_estimator, opts.bootstrap_reps, seed, workers);
        rep.tau.se = boot.se[0];
        rep.zeta_icde.se = boot.se[1];
        rep.delta_iie.se = boot.se[2];
        rep.zeta_iie.se = boot.se[3];
        rep.bootstrap_failures = boot.failures;
    }
    rep.estimator = opts.estimator == IieEstimator::Regression ? "regression" : "weighting";
    rep.interaction_included = opts.interaction;
    if (point[0] != 0.0) {
        rep.pct_reduction_icde = 100.0 * (point[0] - point[1]) / point[0];
        rep.pct_reduction_iie = 100.0 * point[2] / point[0];
    }
    return rep;
}

} // namespace cdsens
