#pragma once

// Decision rules d(H) -> {0,1} over the history variables H = (R, X, C).
// Linear rules score a subset H1 of (X, C); tree rules are axis-aligned
// binary trees over H. Threshold semantics are strict: fire iff score or
// feature value is strictly greater than the cutoff.

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "cdsens/dataset.hpp"
#include "cdsens/error.hpp"

namespace cdsens {

// feature index space for trees: 0 = R, 1..px = X columns, px+1.. = C columns
inline double history_value(const Dataset& ds, int unit, int feature) {
    return feature == 0 ? static_cast<double>(ds.r[unit]) : ds.xc(unit, feature - 1);
}

inline int history_dim(const Dataset& ds) { return 1 + ds.px() + ds.pc(); }

struct TreeNode {
    int feature = -1;      // -1 => leaf
    double threshold = 0.0;
    int label = -1;        // leaf label in {0,1}
    int left = -1;         // value <= threshold
    int right = -1;        // value >  threshold
};

struct TreeRule {
    std::vector<TreeNode> nodes;  // node 0 is the root

    int evaluate(const Dataset& ds, int unit) const {
        int idx = 0;
        for (;;) {
            const TreeNode& nd = nodes[static_cast<std::size_t>(idx)];
            if (nd.feature < 0) return nd.label;
            idx = history_value(ds, unit, nd.feature) > nd.threshold ? nd.right : nd.left;
        }
    }
};

struct LinearRule {
    std::vector<int> h1_cols;  // (x|c) index space
    VectorXd coef;             // one per h1 column
    double intercept = 0.0;

    double score(const Dataset& ds, int unit) const {
        double s = intercept;
        for (std::size_t k = 0; k < h1_cols.size(); ++k)
            s += coef[static_cast<Eigen::Index>(k)] * ds.xc(unit, h1_cols[k]);
        return s;
    }
};

struct DecisionRule {
    enum class Kind { Linear, Tree, Constant };
    Kind kind = Kind::Constant;
    bool stratified = false;
    // index by group when stratified ([0] = reference, [1] = comparison),
    // else a single pooled entry
    std::vector<LinearRule> linear;
    std::vector<TreeRule> tree;
    int constant_value = 0;

    static DecisionRule constant(int v) {
        DecisionRule d;
        d.kind = Kind::Constant;
        d.constant_value = v;
        return d;
    }

    int apply_one(const Dataset& ds, int unit) const {
        std::size_t g = stratified ? static_cast<std::size_t>(ds.r[unit]) : 0u;
        switch (kind) {
            case Kind::Constant: return constant_value;
            case Kind::Linear:
                for (int col : linear[g].h1_cols)
                    if (col >= ds.px() + ds.pc())
                        throw Error("otr.apply_rule", "rule references column " +
                                                          std::to_string(col) +
                                                          " outside dataset schema");
                return linear[g].score(ds, unit) > 0.0 ? 1 : 0;
            case Kind::Tree: return tree[g].evaluate(ds, unit);
        }
        return 0;
    }

    VectorXi apply(const Dataset& ds) const {
        VectorXi out(ds.n);
        for (int i = 0; i < ds.n; ++i) out[i] = apply_one(ds, i);
        return out;
    }
};

} // namespace cdsens
