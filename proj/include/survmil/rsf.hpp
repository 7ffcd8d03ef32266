#pragma once

#include "survmil/ndgrad.hpp"
#include "survmil/survcore.hpp"

#include <cstdint>
#include <iosfwd>
#include <vector>

namespace survmil {

struct RsfConfig {
    std::size_t n_trees = 100;
    std::size_t mtry = 0;             // 0 = ceil(sqrt(n_features))
    std::size_t min_node_events = 3;  // nodes with fewer events become leaves
    std::size_t min_node_size = 15;
    int max_depth = -1;  // -1 unlimited, 0 forces a single-leaf tree
    bool bootstrap = true;
    std::uint64_t seed = 0;
    int threads = 1;
};

struct TreeNode {
    std::int32_t feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::vector<double> chf;  // leaf only: Nelson-Aalen cumulative hazard on the grid
};

struct SurvivalTree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root
};

struct Forest {
    RsfConfig config;
    std::vector<double> event_time_grid;  // distinct training event times, ascending
    std::vector<SurvivalTree> trees;
};

/// Grows each tree on a bootstrap sample; splits maximize the two-sample
/// logrank statistic over candidate thresholds (midpoints of sorted unique
/// feature values) of mtry randomly drawn features. Leaves store Nelson-Aalen
/// cumulative hazard curves on the shared event-time grid. Each tree's RNG
/// stream derives from (seed, tree_index), so results do not depend on record
/// order or scheduling.
Forest fit_forest(const Cohort& cohort, const RsfConfig& config = {});

/// Ensemble mortality: the per-patient sum over the event-time grid of the
/// tree-averaged cumulative hazard, used as the scalar risk score.
std::vector<double> predict_mortality(const Forest& forest, const Matrix& covariates);
RiskScores predict_mortality(const Forest& forest, const Cohort& cohort);

/// Nelson-Aalen cumulative hazard of (times, events) evaluated at grid points.
std::vector<double> nelson_aalen_on_grid(std::span<const double> times,
                                         std::span<const int> events,
                                         std::span<const double> grid);

void save_forest(std::ostream& os, const Forest& forest);
Forest load_forest(std::istream& is);

}  // namespace survmil
