#pragma once

// Report emission: CSV/TSV/JSON artifact writers for the recommendation
// table, the decomposition table, the benchmarking grid, and the
// simulation-study metrics, plus the self-describing assumption ledger
// and the run manifest. All writes are atomic (temp file + rename) and
// all numeric formatting is locale-independent, so identical inputs
// produce byte-identical files.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdsens/benchmark.hpp"
#include "cdsens/decompose.hpp"
#include "cdsens/error.hpp"
#include "cdsens/otr.hpp"
#include "cdsens/rng.hpp"
#include "cdsens/sensem.hpp"
#include "cdsens/simstudy.hpp"

namespace cdsens {

using json = nlohmann::json;

inline std::string format_num(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

inline void write_text_atomic(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("report.write", "cannot open " + tmp + " for writing");
        out << content;
        if (!out) throw Error("report.write", "write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

// stable 64-bit content hash (FNV-1a folded through the seed mixer)
inline std::uint64_t content_hash(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return mix64(h);
}

// Identification assumptions reported as metadata in every summary.
inline json assumption_ledger(bool benchmarking) {
    json a = json::array();
    a.push_back({{"id", "A1"},
                 {"name", "conditional independence"},
                 {"statement", "no omitted confounders of the risk factor-outcome "
                               "relationship given group, intermediate covariates, and "
                               "baseline covariates"}});
    a.push_back({{"id", "A2"},
                 {"name", "positivity"},
                 {"statement", "0 < P(M=1 | R, X, C) < 1 for every covariate pattern"}});
    a.push_back({{"id", "A3"},
                 {"name", "consistency"},
                 {"statement", "observed outcomes equal potential outcomes at the "
                               "observed risk-factor level"}});
    if (benchmarking) {
        a.push_back({{"id", "B1"},
                     {"name", "benchmark independence"},
                     {"statement", "the latent confounder is independent of the remaining "
                                   "covariates R, X, and C"}});
        a.push_back({{"id", "B2"},
                     {"name", "equal residual variance"},
                     {"statement", "the latent confounder's scale matches the residual SD "
                                   "of the benchmark covariate given R, X, and C"}});
    }
    return a;
}

// recommendation/compliance table: rows reference / comparison / total
inline std::string compliance_csv(const std::vector<ComplianceRow>& rows,
                                  const std::string& method) {
    std::string out = "method,group,n,recommendation_rate,compliance_rate\n";
    for (const ComplianceRow& r : rows)
        out += method + "," + r.label + "," + std::to_string(r.n) + "," +
               format_num(r.recommendation_rate) + "," + format_num(r.compliance_rate) +
               "\n";
    return out;
}

// decomposition table: one row per estimand with estimate, SE, stars
inline std::string decomposition_csv(const DecompositionReport& rep) {
    auto row = [](const std::string& name, const EstimateSE& e) {
        return name + "," + format_num(e.est) + "," + format_num(e.se) + "," +
               significance_stars(e.est, e.se) + "\n";
    };
    std::string out = "estimand,estimate,se,stars\n";
    out += row("initial_disparity", rep.tau);
    out += row("disparity_remaining_icde", rep.zeta_icde);
    out += row("disparity_reduction_iie", rep.delta_iie);
    out += row("disparity_remaining_iie", rep.zeta_iie);
    out += "pct_reduction_icde," + format_num(rep.pct_reduction_icde) + ",,\n";
    out += "pct_reduction_iie," + format_num(rep.pct_reduction_iie) + ",,\n";
    return out;
}

inline json decomposition_json(const DecompositionReport& rep) {
    auto ent = [](const EstimateSE& e) {
        json j;
        j["estimate"] = e.est;
        j["se"] = e.se;
        j["stars"] = significance_stars(e.est, e.se);
        return j;
    };
    json j;
    j["initial_disparity"] = ent(rep.tau);
    j["disparity_remaining_icde"] = ent(rep.zeta_icde);
    j["disparity_reduction_iie"] = ent(rep.delta_iie);
    j["disparity_remaining_iie"] = ent(rep.zeta_iie);
    j["pct_reduction_icde"] = rep.pct_reduction_icde;
    j["pct_reduction_iie"] = rep.pct_reduction_iie;
    j["estimator"] = rep.estimator;
    j["interaction_included"] = rep.interaction_included;
    j["bootstrap_failures"] = rep.bootstrap_failures;
    return j;
}

// benchmarking grid: one row per (k_m, k_y) cell
inline std::string benchmark_csv(const BenchmarkTable& table) {
    std::string out =
        "k_m,k_y,beta_u_m,beta_u_y,pct_recommended,"
        "zeta_icde,zeta_icde_se,zeta_icde_stars,"
        "delta_iie,delta_iie_se,delta_iie_stars,"
        "zeta_iie,zeta_iie_se,zeta_iie_stars,"
        "pct_reduction_icde,pct_reduction_iie,status\n";
    for (const BenchmarkCell& c : table.cells) {
        out += format_num(c.k_m) + "," + format_num(c.k_y) + ",";
        if (!c.ok) {
            out += ",,,,,,,,,,,,,,failed: " + c.error + "\n";
            continue;
        }
        auto trio = [](const EstimateSE& e) {
            return format_num(e.est) + "," + format_num(e.se) + "," +
                   significance_stars(e.est, e.se);
        };
        out += format_num(c.beta_u_m) + "," + format_num(c.beta_u_y) + "," +
               format_num(c.pct_recommended) + "," + trio(c.report.zeta_icde) + "," +
               trio(c.report.delta_iie) + "," + trio(c.report.zeta_iie) + "," +
               format_num(c.report.pct_reduction_icde) + "," +
               format_num(c.report.pct_reduction_iie) + ",ok\n";
    }
    return out;
}

// simulation metrics: one row per cell
inline std::string metrics_csv(const MetricsTable& table) {
    std::string out =
        "n,adjusted,mode,sp_y,sp_m,completed,failures,"
        "acc_q25,acc_median,acc_q75,"
        "bias_tau_median,bias_zeta_icde_median,bias_delta_iie_median,"
        "bias_zeta_iie_median,cover_tau,cover_zeta_icde,cover_delta_iie,cover_zeta_iie\n";
    for (const MetricsCell& c : table.cells) {
        out += std::to_string(c.n) + "," + (c.adjusted ? "1" : "0") + "," + c.mode + "," +
               format_num(c.sp_y) + "," + format_num(c.sp_m) + "," +
               std::to_string(c.completed) + "," + std::to_string(c.failures) + "," +
               format_num(c.acc_q25) + "," + format_num(c.acc_median) + "," +
               format_num(c.acc_q75) + "," + format_num(c.bias_tau_median) + "," +
               format_num(c.bias_zeta_icde_median) + "," +
               format_num(c.bias_delta_iie_median) + "," +
               format_num(c.bias_zeta_iie_median) + "," + format_num(c.cover_tau) + "," +
               format_num(c.cover_zeta_icde) + "," + format_num(c.cover_delta_iie) + "," +
               format_num(c.cover_zeta_iie) + "\n";
    }
    return out;
}

// long-format TSV of the per-cell quartile summaries for external plotting
inline std::string metrics_plot_tsv(const MetricsTable& table) {
    std::string out = "n\tadjusted\tmetric\tq25\tmedian\tq75\n";
    for (const MetricsCell& c : table.cells) {
        out += std::to_string(c.n) + "\t" + (c.adjusted ? "1" : "0") + "\taccuracy\t" +
               format_num(c.acc_q25) + "\t" + format_num(c.acc_median) + "\t" +
               format_num(c.acc_q75) + "\n";
    }
    return out;
}

// per-draw sensitivity trajectories for external plotting
inline std::string sensitivity_plot_tsv(const std::vector<SensitivityResult>& results) {
    std::string out =
        "beta_u_y\tbeta_u_m\ttau\tzeta_icde\tdelta_iie\tzeta_iie\tpct_recommended\n";
    for (const SensitivityResult& r : results) {
        double rec = 0.0;
        for (double v : r.recommendation_rate_per_draw) rec += v;
        if (!r.recommendation_rate_per_draw.empty())
            rec /= static_cast<double>(r.recommendation_rate_per_draw.size());
        out += format_num(r.spec.beta_u_y) + "\t" + format_num(r.spec.beta_u_m) + "\t" +
               format_num(r.pooled.tau.est) + "\t" + format_num(r.pooled.zeta_icde.est) +
               "\t" + format_num(r.pooled.delta_iie.est) + "\t" +
               format_num(r.pooled.zeta_iie.est) + "\t" + format_num(100.0 * rec) + "\n";
    }
    return out;
}

// The worker count is deliberately omitted: results are independent of
// it, and keeping it out makes artifacts byte-identical across runs.
inline json manifest_json(const std::string& command, const std::string& config_text,
                          std::uint64_t seed) {
    json m;
    m["tool"] = "cdsens";
    m["version"] = "1.0.0";
    m["command"] = command;
    m["config_hash"] = content_hash(config_text);
    m["seed"] = seed;
    return m;
}

} // namespace cdsens
