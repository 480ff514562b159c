#pragma once

// Simulation-study harness: a fully specified data-generating process
// with a known optimal rule, population-level truth computation, and a
// grid runner that measures OTR accuracy, bias, and 95% CI coverage of
// the decomposition estimands with and without latent-confounder
// adjustment.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cdsens/dataset.hpp"
#include "cdsens/decompose.hpp"
#include "cdsens/error.hpp"
#include "cdsens/parallel.hpp"
#include "cdsens/rng.hpp"
#include "cdsens/sensem.hpp"

namespace cdsens {

struct DgpConfig {
    enum class Mode { Constant, Heterogeneous };
    Mode mode = Mode::Constant;
    double beta_u_y = 0.5;
    double beta_u_m = 0.5;
    int population_size = 1000000;
    std::uint64_t seed = 1;

    void validate() const {
        if (population_size < 10000)
            throw Error("simstudy.dgp", "population_size must be >= 10^4");
        if (!std::isfinite(beta_u_y) || !std::isfinite(beta_u_m))
            throw Error("simstudy.dgp", "sensitivity parameters must be finite");
    }
};

// Dataset plus the oracle columns the estimators never see.
struct Population {
    Dataset ds;
    VectorXd u;      // latent confounder, {0,1}
    VectorXi m_opt;  // true optimal decision per unit
    DgpConfig cfg;
};

inline Population generate_population(const DgpConfig& cfg) {
    cfg.validate();
    Population pop;
    pop.cfg = cfg;
    int n = cfg.population_size;
    Rng rng(derive_seed(cfg.seed, 0xd69u));

    Dataset& ds = pop.ds;
    ds.n = n;
    ds.y.resize(n);
    ds.m.resize(n);
    ds.r.resize(n);
    ds.c.resize(n, 1);
    ds.x.resize(n, 3);
    ds.y_name = "Y";
    ds.m_name = "M";
    ds.r_name = "R";
    ds.c_names = {"C"};
    ds.x_names = {"X1", "X2", "X3"};
    ds.h1_cols = cfg.mode == DgpConfig::Mode::Constant ? std::vector<int>{0, 1}
                                                       : std::vector<int>{0};
    pop.u.resize(n);
    pop.m_opt.resize(n);

    for (int i = 0; i < n; ++i) {
        double c = rng.bernoulli(0.4) ? 1.0 : 0.0;
        int r = rng.bernoulli(expit(1.0 - 0.5 * c)) ? 1 : 0;
        double u = rng.bernoulli(0.5) ? 1.0 : 0.0;
        double x1 = -0.8 + r + 1.5 * c + rng.normal();
        double x2 = 0.5 + 0.5 * r + 0.5 * c + rng.normal();
        double x3 = -0.8 - r + 0.5 * c + rng.normal();
        int mopt = cfg.mode == DgpConfig::Mode::Constant
                       ? (x1 > 0.1 && x2 > 0.1 ? 1 : 0)
                       : (x1 > 0.1 && u > 0.5 ? 1 : 0);
        int m = rng.bernoulli(expit(0.5 - 0.5 * r + 0.2 * x1 + 0.5 * c + cfg.beta_u_m * u))
                    ? 1 : 0;
        double pen = static_cast<double>(m - mopt);
        double y = 0.5 - 0.5 * r + 0.25 * x1 + 0.25 * x2 - 0.25 * x3 -
                   cfg.beta_u_m * pen * pen + 0.25 * c + cfg.beta_u_y * u + rng.normal();
        ds.c(i, 0) = c;
        ds.r[i] = r;
        ds.m[i] = m;
        ds.x(i, 0) = x1;
        ds.x(i, 1) = x2;
        ds.x(i, 2) = x3;
        ds.y[i] = y;
        pop.u[i] = u;
        pop.m_opt[i] = mopt;
    }
    return pop;
}

struct TrueEstimands {
    double tau = 0.0;
    double zeta_icde = 0.0;
    double delta_iie = 0.0;
    double zeta_iie = 0.0;
    double value_true_rule = 0.0;  // E[Y(d_true)]
};

// Population-level truths. Forcing M := M_opt only removes the penalty
// term, so counterfactual outcomes reuse the realized noise (epsilon_4
// held fixed). The K intervention redraws comparison-group compliance
// from the reference-group rate.
inline TrueEstimands true_estimands(const Population& pop, std::uint64_t seed = 7) {
    const Dataset& ds = pop.ds;
    int n = ds.n;
    double bm = pop.cfg.beta_u_m;

    auto disparity_coef = [&](const VectorXd& y) {
        MatrixXd d(n, 3);
        for (int i = 0; i < n; ++i) {
            d(i, 0) = 1.0;
            d(i, 1) = ds.r[i];
            d(i, 2) = ds.c(i, 0);
        }
        return fit_wls(d, y, VectorXd::Ones(n)).coefficients[1];
    };

    TrueEstimands t;
    t.tau = disparity_coef(ds.y);

    VectorXd y_forced(n);
    for (int i = 0; i < n; ++i) {
        double pen = static_cast<double>(ds.m[i] - pop.m_opt[i]);
        y_forced[i] = ds.y[i] + bm * pen * pen;
    }
    t.zeta_icde = disparity_coef(y_forced);
    t.value_true_rule = y_forced.mean();

    // reference-group compliance rate
    double comp0 = 0.0, n0 = 0.0;
    for (int i = 0; i < n; ++i) {
        if (ds.r[i] != 0) continue;
        comp0 += (ds.m[i] == pop.m_opt[i]);
        n0 += 1.0;
    }
    comp0 /= n0;

    Rng rng(derive_seed(seed, 0x7e0e5u));
    double dy = 0.0, n1 = 0.0;
    for (int i = 0; i < n; ++i) {
        if (ds.r[i] != 1) continue;
        int g = rng.bernoulli(comp0) ? 1 : 0;
        int m_new = g ? pop.m_opt[i] : 1 - pop.m_opt[i];
        double pen_old = static_cast<double>(ds.m[i] - pop.m_opt[i]);
        double pen_new = static_cast<double>(m_new - pop.m_opt[i]);
        double y_k = ds.y[i] + bm * (pen_old * pen_old - pen_new * pen_new);
        dy += ds.y[i] - y_k;
        n1 += 1.0;
    }
    t.delta_iie = dy / n1;
    t.zeta_iie = t.tau - t.delta_iie;
    return t;
}

struct ExperimentConfig {
    std::vector<int> n_grid = {500, 1000, 2000};
    int iterations = 100;
    bool run_unadjusted = true;
    bool run_adjusted = true;
    OtrMethod otr_method = OtrMethod::QLearning;
    TreeParams tree;
    IieEstimator iie_estimator = IieEstimator::Regression;
    bool stratify = false;  // DGP rules are not group-specific
    int S = 10;
    int B_boot = 0;  // 0 disables bootstrap/coverage, keeps accuracy+bias
    // bootstrap replicates re-estimate the rule so the intervals carry
    // rule-estimation uncertainty, not just outcome-model noise
    bool refit_rule_in_bootstrap = true;
    EmSchedule em;
    int workers = 1;
    bool accuracy_on_fresh_population = false;
    int fresh_eval_size = 20000;
    std::uint64_t master_seed = 1;
};

struct MetricsCell {
    int n = 0;
    bool adjusted = false;
    double sp_y = 0.0, sp_m = 0.0;
    std::string mode;
    // quartiles over iterations
    double acc_median = 0.0, acc_q25 = 0.0, acc_q75 = 0.0;
    double bias_tau_median = 0.0;
    double bias_zeta_icde_median = 0.0;
    double bias_delta_iie_median = 0.0;
    double bias_zeta_iie_median = 0.0;
    // empirical 95% CI coverage (NaN when B_boot = 0)
    double cover_tau = std::numeric_limits<double>::quiet_NaN();
    double cover_zeta_icde = std::numeric_limits<double>::quiet_NaN();
    double cover_delta_iie = std::numeric_limits<double>::quiet_NaN();
    double cover_zeta_iie = std::numeric_limits<double>::quiet_NaN();
    int failures = 0;
    int completed = 0;
};

struct MetricsTable {
    TrueEstimands truths;
    std::vector<MetricsCell> cells;
};

namespace simdetail {

struct IterationOutcome {
    double accuracy = 0.0;
    Eigen::Vector4d est;
    Eigen::Vector4d se;  // NaN when unavailable
    Eigen::Vector4d df;  // interval reference df; infinite unless pooled
    bool ok = false;
};

inline double quantile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double idx = p * (static_cast<double>(v.size()) - 1.0);
    std::size_t lo = static_cast<std::size_t>(idx);
    std::size_t hi = std::min(lo + 1, v.size() - 1);
    double f = idx - static_cast<double>(lo);
    return v[lo] * (1.0 - f) + v[hi] * f;
}

// sample without replacement: partial Fisher-Yates over an index pool
inline std::vector<int> sample_rows(int pop_n, int n, Rng& rng) {
    std::vector<int> idx(static_cast<std::size_t>(pop_n));
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < n; ++i) {
        std::size_t j = static_cast<std::size_t>(i) +
                        rng.below(static_cast<std::uint64_t>(pop_n - i));
        std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
    }
    idx.resize(static_cast<std::size_t>(n));
    return idx;
}

} // namespace simdetail

inline MetricsTable run_experiment(const Population& pop, const ExperimentConfig& cfg) {
    const std::string where = "simstudy.run_experiment";
    if (cfg.iterations < 10) throw Error(where, "iterations must be >= 10");
    MetricsTable table;
    table.truths = true_estimands(pop, derive_seed(cfg.master_seed, 0x7271u));
    Eigen::Vector4d truth{table.truths.tau, table.truths.zeta_icde, table.truths.delta_iie,
                          table.truths.zeta_iie};

    SensitivitySpec spec;
    spec.u_kind = SensitivitySpec::UKind::Binary;
    spec.pi = 0.5;
    spec.beta_u_y = pop.cfg.beta_u_y;
    spec.beta_u_m = pop.cfg.beta_u_m;
    spec.heterogeneous_u = pop.cfg.mode == DgpConfig::Mode::Heterogeneous;

    for (int n : cfg.n_grid) {
        for (int adj = 0; adj <= 1; ++adj) {
            if (adj == 0 && !cfg.run_unadjusted) continue;
            if (adj == 1 && !cfg.run_adjusted) continue;

            std::vector<simdetail::IterationOutcome> outs(
                static_cast<std::size_t>(cfg.iterations));
            parallel_for(static_cast<std::size_t>(cfg.iterations), cfg.workers,
                         [&](std::size_t it) {
                std::uint64_t it_seed =
                    derive_seed(cfg.master_seed, static_cast<std::uint64_t>(n),
                                static_cast<std::uint64_t>(it));
                Rng rng(it_seed);
                std::vector<int> rows = simdetail::sample_rows(pop.ds.n, n, rng);
                Dataset sample = pop.ds.subset(rows);
                // estimators expect allowable covariates centered at the
                // analysis sample's own means
                for (int j = 0; j < sample.c.cols(); ++j)
                    sample.c.col(j).array() -= sample.c.col(j).mean();
                VectorXi mopt(n);
                for (int i = 0; i < n; ++i)
                    mopt[i] = pop.m_opt[rows[static_cast<std::size_t>(i)]];
                simdetail::IterationOutcome& out = outs[it];
                out.se.setConstant(std::numeric_limits<double>::quiet_NaN());
                out.df.setConstant(std::numeric_limits<double>::infinity());
                try {
                    DecomposeOptions dopts;
                    dopts.estimator = cfg.iie_estimator;
                    dopts.stratify_propensity = cfg.stratify;
                    dopts.bootstrap_reps = cfg.B_boot;
                    dopts.refit_rule_in_bootstrap = cfg.refit_rule_in_bootstrap;
                    if (adj == 0) {
                        DecisionRule rule =
                            fit_otr(sample, cfg.otr_method, cfg.stratify, cfg.tree);
                        VectorXi d = rule.apply(sample);
                        double acc = 0.0;
                        for (int i = 0; i < n; ++i) acc += (d[i] == mopt[i]);
                        out.accuracy = acc / n;
                        auto refitter = [&](const Dataset& bds) {
                            return fit_otr(bds, cfg.otr_method, cfg.stratify, cfg.tree);
                        };
                        DecompositionReport rep = run_decomposition(
                            sample, rule, dopts, derive_seed(it_seed, 0xabu), 1, refitter);
                        out.est = {rep.tau.est, rep.zeta_icde.est, rep.delta_iie.est,
                                   rep.zeta_iie.est};
                        out.se = {rep.tau.se, rep.zeta_icde.se, rep.delta_iie.se,
                                  rep.zeta_iie.se};
                    } else {
                        AnalysisOptions aopts;
                        aopts.otr_method = cfg.otr_method;
                        aopts.tree = cfg.tree;
                        aopts.stratify_otr = cfg.stratify;
                        aopts.decompose = dopts;
                        aopts.S = cfg.S;
                        aopts.em = cfg.em;
                        SensitivityResult res =
                            adjusted_analysis(sample, spec, aopts, derive_seed(it_seed, 0xcd));
                        // per-draw rule decisions scored against the sample's own M_opt
                        double acc = 0.0;
                        int used = 0;
                        for (const VectorXi& d : res.decisions_per_draw) {
                            double a = 0.0;
                            for (int i = 0; i < n; ++i) a += (d[i] == mopt[i]);
                            acc += a / n;
                            ++used;
                        }
                        if (used == 0) throw Error(where, "no usable U draw");
                        out.accuracy = acc / used;
                        out.est = {res.pooled.tau.est, res.pooled.zeta_icde.est,
                                   res.pooled.delta_iie.est, res.pooled.zeta_iie.est};
                        if (cfg.B_boot >= 2) {
                            out.se = {res.pooled.tau.se, res.pooled.zeta_icde.se,
                                      res.pooled.delta_iie.se, res.pooled.zeta_iie.se};
                            out.df = {res.pooled.tau.df, res.pooled.zeta_icde.df,
                                      res.pooled.delta_iie.df, res.pooled.zeta_iie.df};
                        }
                    }
                    out.ok = true;
                } catch (const Error&) {
                    out.ok = false;
                }
            });

            MetricsCell cell;
            cell.n = n;
            cell.adjusted = adj == 1;
            cell.sp_y = pop.cfg.beta_u_y;
            cell.sp_m = pop.cfg.beta_u_m;
            cell.mode =
                pop.cfg.mode == DgpConfig::Mode::Constant ? "constant" : "heterogeneous";
            std::vector<double> acc;
            std::vector<double> bias[4];
            double covered[4] = {0, 0, 0, 0};
            double cover_n = 0.0;
            for (const auto& out : outs) {
                if (!out.ok) { ++cell.failures; continue; }
                ++cell.completed;
                acc.push_back(out.accuracy);
                for (int k = 0; k < 4; ++k) bias[k].push_back(out.est[k] - truth[k]);
                if (std::isfinite(out.se[0])) {
                    cover_n += 1.0;
                    for (int k = 0; k < 4; ++k) {
                        double crit = std::isfinite(out.df[k])
                                          ? student_t_quantile(0.975, out.df[k])
                                          : 1.959963985;
                        covered[k] += (std::fabs(out.est[k] - truth[k]) <= crit * out.se[k]);
                    }
                }
            }
            if (cell.failures * 10 > cfg.iterations)
                throw Error(where, "cell (n=" + std::to_string(n) + ", adjusted=" +
                                       std::to_string(adj) + "): " +
                                       std::to_string(cell.failures) +
                                       " iteration failures (> 10%)");
            cell.acc_median = simdetail::quantile(acc, 0.5);
            cell.acc_q25 = simdetail::quantile(acc, 0.25);
            cell.acc_q75 = simdetail::quantile(acc, 0.75);
            cell.bias_tau_median = simdetail::quantile(bias[0], 0.5);
            cell.bias_zeta_icde_median = simdetail::quantile(bias[1], 0.5);
            cell.bias_delta_iie_median = simdetail::quantile(bias[2], 0.5);
            cell.bias_zeta_iie_median = simdetail::quantile(bias[3], 0.5);
            if (cover_n > 0.0) {
                cell.cover_tau = covered[0] / cover_n;
                cell.cover_zeta_icde = covered[1] / cover_n;
                cell.cover_delta_iie = covered[2] / cover_n;
                cell.cover_zeta_iie = covered[3] / cover_n;
            }
            table.cells.push_back(cell);
        }
    }
    return table;
}

} // namespace cdsens
