#pragma once

// Dataset schema and CSV ingestion. Columns are role-tagged: outcome Y,
// binary risk factor M, binary group R (1 = comparison, 0 = reference),
// baseline covariates C, intermediate confounders X, plus two index
// subsets over the (X, C) columns: effect modifiers H1 and
// target-factor-allowable covariates Am. Missing data is a hard error.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cdsens/error.hpp"

namespace cdsens {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

struct RoleMap {
    std::string y;
    std::string m;
    std::string r;
    std::vector<std::string> c;
    std::vector<std::string> x;
    std::vector<std::string> h1;  // subset of x + c names
    std::vector<std::string> am;  // subset of x + c names
};

// Immutable after load; safe to share read-only across threads.
struct Dataset {
    int n = 0;
    VectorXd y;
    VectorXi m;
    VectorXi r;
    MatrixXd c;            // n x pc
    MatrixXd x;            // n x px
    std::string y_name, m_name, r_name;
    std::vector<std::string> c_names;
    std::vector<std::string> x_names;
    // indices into the concatenated (x | c) column space:
    // 0..px-1 are x columns, px..px+pc-1 are c columns
    std::vector<int> h1_cols;
    std::vector<int> am_cols;

    int px() const { return static_cast<int>(x.cols()); }
    int pc() const { return static_cast<int>(c.cols()); }

    // value of covariate column j (in (x|c) index space) for unit i
    double xc(int i, int j) const {
        return j < px() ? x(i, j) : c(i, j - px());
    }

    const std::string& xc_name(int j) const {
        return j < px() ? x_names[static_cast<std::size_t>(j)]
                        : c_names[static_cast<std::size_t>(j - px())];
    }

    MatrixXd xc_matrix(const std::vector<int>& cols) const {
        MatrixXd out(n, static_cast<Eigen::Index>(cols.size()));
        for (std::size_t k = 0; k < cols.size(); ++k)
            for (int i = 0; i < n; ++i) out(i, static_cast<Eigen::Index>(k)) = xc(i, cols[k]);
        return out;
    }

    int count_group(int g) const {
        int s = 0;
        for (int i = 0; i < n; ++i) s += (r[i] == g);
        return s;
    }

    // row subset, preserving order
    Dataset subset(const std::vector<int>& rows) const {
        Dataset out = *this;
        int k = static_cast<int>(rows.size());
        out.n = k;
        out.y.resize(k);
        out.m.resize(k);
        out.r.resize(k);
        out.c.resize(k, c.cols());
        out.x.resize(k, x.cols());
        for (int i = 0; i < k; ++i) {
            int s = rows[static_cast<std::size_t>(i)];
            out.y[i] = y[s];
            out.m[i] = m[s];
            out.r[i] = r[s];
            out.c.row(i) = c.row(s);
            out.x.row(i) = x.row(s);
        }
        return out;
    }

    // append an extra confounder column (used to add a simulated U to X)
    Dataset with_extra_x(const VectorXd& u, const std::string& name,
                         bool also_h1 = false) const {
        Dataset out = *this;
        out.x.resize(n, x.cols() + 1);
        out.x.leftCols(x.cols()) = x;
        out.x.col(x.cols()) = u;
        out.x_names = x_names;
        out.x_names.push_back(name);
        // x gained a column at index px(); shift c-space indices by one
        out.h1_cols.clear();
        for (int j : h1_cols) out.h1_cols.push_back(j < px() ? j : j + 1);
        out.am_cols.clear();
        for (int j : am_cols) out.am_cols.push_back(j < px() ? j : j + 1);
        if (also_h1) out.h1_cols.push_back(px());
        return out;
    }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

} // namespace detail

inline Dataset load_dataset(const std::string& path, const RoleMap& roles) {
    const std::string where = "model_core.load_dataset";
    std::ifstream in(path);
    if (!in) throw Error(where, "cannot open file: " + path);

    std::string line;
    if (!std::getline(in, line)) throw Error(where, "empty file: " + path);
    std::vector<std::string> header = detail::split_csv_line(line);
    for (auto& h : header) h = detail::trim(h);

    auto col_of = [&](const std::string& name) {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end())
            throw Error(where, "missing header column: " + name);
        return static_cast<int>(it - header.begin());
    };

    int yc = col_of(roles.y), mc = col_of(roles.m), rc = col_of(roles.r);
    std::vector<int> ccols, xcols;
    for (const auto& nm : roles.c) ccols.push_back(col_of(nm));
    for (const auto& nm : roles.x) xcols.push_back(col_of(nm));

    std::vector<std::vector<double>> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        std::vector<std::string> cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw Error(where, "row " + std::to_string(lineno) + " has " +
                                   std::to_string(cells.size()) + " cells, expected " +
                                   std::to_string(header.size()));
        std::vector<double> vals(cells.size());
        for (std::size_t j = 0; j < cells.size(); ++j) {
            std::string cell = detail::trim(cells[j]);
            if (cell.empty() || cell == "NA" || cell == "nan" || cell == "NaN")
                throw Error(where, "missing value at row " + std::to_string(lineno) +
                                       ", column '" + header[j] + "'");
            char* end = nullptr;
            double v = std::strtod(cell.c_str(), &end);
            if (end == cell.c_str() || *end != '\0' || !std::isfinite(v))
                throw Error(where, "non-numeric cell '" + cell + "' at row " +
                                       std::to_string(lineno) + ", column '" + header[j] + "'");
            vals[j] = v;
        }
        rows.push_back(std::move(vals));
    }
    if (rows.empty()) throw Error(where, "no data rows in " + path);

    Dataset ds;
    ds.n = static_cast<int>(rows.size());
    ds.y.resize(ds.n);
    ds.m.resize(ds.n);
    ds.r.resize(ds.n);
    ds.c.resize(ds.n, static_cast<Eigen::Index>(ccols.size()));
    ds.x.resize(ds.n, static_cast<Eigen::Index>(xcols.size()));
    ds.y_name = roles.y;
    ds.m_name = roles.m;
    ds.r_name = roles.r;
    ds.c_names = roles.c;
    ds.x_names = roles.x;

    auto as_binary = [&](double v, const std::string& nm, int i) {
        if (v != 0.0 && v != 1.0)
            throw Error(where, nm + " value outside {0,1} at data row " +
                                   std::to_string(i + 1));
        return static_cast<int>(v);
    };
    for (int i = 0; i < ds.n; ++i) {
        const auto& rv = rows[static_cast<std::size_t>(i)];
        ds.y[i] = rv[static_cast<std::size_t>(yc)];
        ds.m[i] = as_binary(rv[static_cast<std::size_t>(mc)], roles.m, i);
        ds.r[i] = as_binary(rv[static_cast<std::size_t>(rc)], roles.r, i);
        for (std::size_t j = 0; j < ccols.size(); ++j)
            ds.c(i, static_cast<Eigen::Index>(j)) = rv[static_cast<std::size_t>(ccols[j])];
        for (std::size_t j = 0; j < xcols.size(); ++j)
            ds.x(i, static_cast<Eigen::Index>(j)) = rv[static_cast<std::size_t>(xcols[j])];
    }

    if (ds.count_group(1) < 1 || ds.count_group(0) < 1)
        throw Error(where, "empty group: both R=0 and R=1 must be present");

    auto xc_index = [&](const std::string& nm) {
        auto xi = std::find(ds.x_names.begin(), ds.x_names.end(), nm);
        if (xi != ds.x_names.end()) return static_cast<int>(xi - ds.x_names.begin());
        auto ci = std::find(ds.c_names.begin(), ds.c_names.end(), nm);
        if (ci != ds.c_names.end())
            return ds.px() + static_cast<int>(ci - ds.c_names.begin());
        throw Error(where, "H1/Am column '" + nm + "' is not an X or C column");
    };
    for (const auto& nm : roles.h1) ds.h1_cols.push_back(xc_index(nm));
    for (const auto& nm : roles.am) ds.am_cols.push_back(xc_index(nm));
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("model_core.save_dataset", "cannot write: " + path);
    out << ds.y_name << ',' << ds.m_name << ',' << ds.r_name;
    for (const auto& nm : ds.x_names) out << ',' << nm;
    for (const auto& nm : ds.c_names) out << ',' << nm;
    out << '\n';
    char buf[64];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        out << buf;
    };
    for (int i = 0; i < ds.n; ++i) {
        put(ds.y[i]);
        out << ',' << ds.m[i] << ',' << ds.r[i];
        for (int j = 0; j < ds.px(); ++j) { out << ','; put(ds.x(i, j)); }
        for (int j = 0; j < ds.pc(); ++j) { out << ','; put(ds.c(i, j)); }
        out << '\n';
    }
}

struct CenterResult {
    Dataset ds;
    VectorXd centers;  // the values mapped to zero, one per C column
};

// Shift C columns so the chosen center maps to 0. Empty `explicit_centers`
// means center at the column means.
inline CenterResult center_covariates(const Dataset& ds,
                                      const std::optional<VectorXd>& explicit_centers = {}) {
    const std::string where = "model_core.center_covariates";
    CenterResult out{ds, VectorXd::Zero(ds.pc())};
    if (explicit_centers) {
        if (explicit_centers->size() != ds.pc())
            throw Error(where, "explicit centers length " +
                                   std::to_string(explicit_centers->size()) +
                                   " != C column count " + std::to_string(ds.pc()));
        out.centers = *explicit_centers;
    } else if (ds.n > 0 && ds.pc() > 0) {
        out.centers = ds.c.colwise().mean();
    }
    for (int j = 0; j < ds.pc(); ++j)
        out.ds.c.col(j).array() -= out.centers[j];
    return out;
}

} // namespace cdsens
