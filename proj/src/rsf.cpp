#include "survmil/rsf.hpp"

#include "survmil/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace survmil {

std::vector<double> nelson_aalen_on_grid(std::span<const double> times,
                                         std::span<const int> events,
                                         std::span<const double> grid) {
    std::vector<std::size_t> order(times.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });

    std::vector<double> chf(grid.size(), 0.0);
    double cumulative = 0.0;
    std::size_t pos = 0;  // next sample to leave the risk set
    std::size_t at_risk = times.size();
    for (std::size_t g = 0; g < grid.size(); ++g) {
        // Remove samples with time < grid[g]; they are no longer at risk.
        while (pos < order.size() && times[order[pos]] < grid[g]) {
            ++pos;
            --at_risk;
        }
        std::size_t deaths = 0;
        for (std::size_t q = pos; q < order.size() && times[order[q]] == grid[g]; ++q)
            deaths += (events[order[q]] == 1);
        if (at_risk > 0 && deaths > 0)
            cumulative += static_cast<double>(deaths) / static_cast<double>(at_risk);
        chf[g] = cumulative;
    }
    return chf;
}

namespace {

struct TrainingData {
    Matrix x;  // canonical order
    std::vector<double> times;
    std::vector<int> events;
};

// Two-sample logrank statistic between left (mask true) and right samples.
// `sorted` holds sample positions ordered ascending by time.
double logrank_split_stat(const TrainingData& data, std::span<const std::size_t> sorted,
                          std::span<const char> in_left) {
    double observed_left = 0.0, expected_left = 0.0, variance = 0.0;
    std::size_t at_risk = sorted.size();
    std::size_t at_risk_left = 0;
    for (std::size_t s : sorted) at_risk_left += in_left[s] != 0;

    for (std::size_t k = 0; k < sorted.size();) {
        const double t = data.times[sorted[k]];
        std::size_t deaths = 0, deaths_left = 0, leaving = 0, leaving_left = 0;
        while (k < sorted.size() && data.times[sorted[k]] == t) {
            const std::size_t s = sorted[k];
            ++leaving;
            leaving_left += in_left[s] != 0;
            if (data.events[s] == 1) {
                ++deaths;
                deaths_left += in_left[s] != 0;
            }
            ++k;
        }
        if (deaths > 0 && at_risk > 1) {
            const double n = static_cast<double>(at_risk);
            const double nl = static_cast<double>(at_risk_left);
            const double d = static_cast<double>(deaths);
            observed_left += static_cast<double>(deaths_left);
            expected_left += d * nl / n;
            variance += d * (nl / n) * (1.0 - nl / n) * (n - d) / (n - 1.0);
        }
        at_risk -= leaving;
        at_risk_left -= leaving_left;
    }
    if (variance <= 0.0) return 0.0;
    const double diff = observed_left - expected_left;
    return diff * diff / variance;
}

struct SplitChoice {
    bool found = false;
    std::size_t feature = 0;
    double threshold = 0.0;
    double statistic = 0.0;
};

class TreeGrower {
public:
    TreeGrower(const TrainingData& data, const RsfConfig& cfg, std::span<const double> grid,
               std::mt19937_64 rng)
        : data_(data), cfg_(cfg), grid_(grid), rng_(std::move(rng)) {}

    SurvivalTree grow(std::vector<std::size_t> samples) {
        tree_.nodes.clear();
        build_node(std::move(samples), 0);
        return std::move(tree_);
    }

private:
    std::int32_t build_node(std::vector<std::size_t> samples, int depth) {
        const std::int32_t node_id = static_cast<std::int32_t>(tree_.nodes.size());
        tree_.nodes.emplace_back();

        std::size_t events = 0;
        for (std::size_t s : samples) events += data_.events[s] == 1;
        const bool depth_capped = cfg_.max_depth >= 0 && depth >= cfg_.max_depth;
        SplitChoice split;
        if (!depth_capped && events >= cfg_.min_node_events &&
            samples.size() >= cfg_.min_node_size)
            split = best_split(samples);

        if (!split.found) {
            make_leaf(node_id, samples);
            return node_id;
        }

        std::vector<std::size_t> left, right;
        for (std::size_t s : samples) {
            if (data_.x(s, split.feature) <= split.threshold)
                left.push_back(s);
            else
                right.push_back(s);
        }
        samples.clear();
        samples.shrink_to_fit();
        tree_.nodes[node_id].feature = static_cast<std::int32_t>(split.feature);
        tree_.nodes[node_id].threshold = split.threshold;
        const std::int32_t l = build_node(std::move(left), depth + 1);
        tree_.nodes[node_id].left = l;
        const std::int32_t r = build_node(std::move(right), depth + 1);
        tree_.nodes[node_id].right = r;
        return node_id;
    }

    void make_leaf(std::int32_t node_id, const std::vector<std::size_t>& samples) {
        std::vector<double> t;
        std::vector<int> e;
        t.reserve(samples.size());
        e.reserve(samples.size());
        for (std::size_t s : samples) {
            t.push_back(data_.times[s]);
            e.push_back(data_.events[s]);
        }
        tree_.nodes[node_id].chf = nelson_aalen_on_grid(t, e, grid_);
    }

    SplitChoice best_split(const std::vector<std::size_t>& samples) {
        const std::size_t p = data_.x.cols;
        const std::size_t mtry = std::min(cfg_.mtry, p);

        // Partial Fisher-Yates draw of mtry distinct features.
        std::vector<std::size_t> features(p);
        std::iota(features.begin(), features.end(), 0);
        for (std::size_t i = 0; i < mtry; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, p - 1);
            std::swap(features[i], features[pick(rng_)]);
        }

        std::vector<std::size_t> sorted(samples);
        std::sort(sorted.begin(), sorted.end(),
                  [&](std::size_t a, std::size_t b) { return data_.times[a] < data_.times[b]; });

        SplitChoice best;
        std::vector<char> in_left(data_.times.size(), 0);
        std::vector<double> values;
        for (std::size_t fi = 0; fi < mtry; ++fi) {
            const std::size_t f = features[fi];
            values.clear();
            for (std::size_t s : samples) values.push_back(data_.x(s, f));
            std::sort(values.begin(), values.end());
            values.erase(std::unique(values.begin(), values.end()), values.end());
            for (std::size_t v = 0; v + 1 < values.size(); ++v) {
                const double threshold = 0.5 * (values[v] + values[v + 1]);
                for (std::size_t s : samples) in_left[s] = data_.x(s, f) <= threshold ? 1 : 0;
                const double stat = logrank_split_stat(data_, sorted, in_left);
                if (stat > best.statistic) {
                    best.found = true;
                    best.statistic = stat;
                    best.feature = f;
                    best.threshold = threshold;
                }
            }
        }
        return best;
    }

    const TrainingData& data_;
    const RsfConfig& cfg_;
    std::span<const double> grid_;
    std::mt19937_64 rng_;
    SurvivalTree tree_;
};

}  // namespace

Forest fit_forest(const Cohort& cohort, const RsfConfig& config) {
    cohort.validate();
    const std::size_t p = cohort.covariate_dim();
    if (p == 0) throw std::invalid_argument("fit_forest: cohort has no covariates");
    if (cohort.n_events() == 0) throw std::invalid_argument("fit_forest: cohort has no events");
    if (config.n_trees < 1) throw std::invalid_argument("fit_forest: n_trees must be >= 1");
    if (config.mtry > p) throw std::invalid_argument("fit_forest: mtry exceeds feature count");

    // Canonical order by patient_id makes the fit independent of record order.
    std::vector<std::size_t> order(cohort.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return cohort.records[a].patient_id < cohort.records[b].patient_id;
    });

    TrainingData data;
    data.x = Matrix(cohort.size(), p);
    data.times.resize(cohort.size());
    data.events.resize(cohort.size());
    for (std::size_t row = 0; row < cohort.size(); ++row) {
        const auto& rec = cohort.records[order[row]];
        data.times[row] = rec.time;
        data.events[row] = rec.event;
        for (std::size_t k = 0; k < p; ++k) data.x(row, k) = rec.covariates[k];
    }

    Forest forest;
    forest.config = config;
    if (forest.config.mtry == 0)
        forest.config.mtry =
            static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(p))));

    std::vector<double> event_times;
    for (std::size_t i = 0; i < data.times.size(); ++i)
        if (data.events[i] == 1) event_times.push_back(data.times[i]);
    std::sort(event_times.begin(), event_times.end());
    event_times.erase(std::unique(event_times.begin(), event_times.end()), event_times.end());
    forest.event_time_grid = std::move(event_times);

    const std::size_t n = cohort.size();
    forest.trees.resize(forest.config.n_trees);
    parallel_for(forest.config.n_trees, config.threads, [&](std::size_t tree_idx) {
        std::mt19937_64 rng(derive_seed(config.seed, tree_idx));
        std::vector<std::size_t> samples(n);
        if (forest.config.bootstrap) {
            std::uniform_int_distribution<std::size_t> pick(0, n - 1);
            for (std::size_t i = 0; i < n; ++i) samples[i] = pick(rng);
        } else {
            std::iota(samples.begin(), samples.end(), 0);
        }
        TreeGrower grower(data, forest.config, forest.event_time_grid, std::move(rng));
        forest.trees[tree_idx] = grower.grow(std::move(samples));
    });
    return forest;
}

std::vector<double> predict_mortality(const Forest& forest, const Matrix& covariates) {
    if (forest.trees.empty()) throw std::invalid_argument("predict_mortality: empty forest");
    const std::size_t grid_size = forest.event_time_grid.size();
    std::vector<double> mortality(covariates.rows, 0.0);
    std::vector<double> averaged(grid_size);
    for (std::size_t i = 0; i < covariates.rows; ++i) {
        std::fill(averaged.begin(), averaged.end(), 0.0);
        for (const SurvivalTree& tree : forest.trees) {
            std::int32_t node = 0;
            while (tree.nodes[node].feature >= 0) {
                const TreeNode& nd = tree.nodes[node];
                if (static_cast<std::size_t>(nd.feature) >= covariates.cols)
                    throw std::invalid_argument("predict_mortality: covariate width mismatch");
                node = covariates(i, nd.feature) <= nd.threshold ? nd.left : nd.right;
            }
            const auto& chf = tree.nodes[node].chf;
            for (std::size_t g = 0; g < grid_size; ++g) averaged[g] += chf[g];
        }
        double sum = 0.0;
        for (std::size_t g = 0; g < grid_size; ++g)
            sum += averaged[g] / static_cast<double>(forest.trees.size());
        mortality[i] = sum;
    }
    return mortality;
}

RiskScores predict_mortality(const Forest& forest, const Cohort& cohort) {
    const std::size_t p = cohort.covariate_dim();
    Matrix x(cohort.size(), p);
    for (std::size_t i = 0; i < cohort.size(); ++i)
        for (std::size_t k = 0; k < p; ++k) x(i, k) = cohort.records[i].covariates[k];
    return RiskScores::aligned(cohort, predict_mortality(forest, x));
}

namespace {

template <typename T>
void put_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_pod(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("forest blob: truncated");
    return v;
}

constexpr char kForestMagic[4] = {'R', 'S', 'F', '1'};

}  // namespace

void save_forest(std::ostream& os, const Forest& forest) {
    os.write(kForestMagic, 4);
    put_pod<std::uint32_t>(os, static_cast<std::uint32_t>(forest.event_time_grid.size()));
    for (double t : forest.event_time_grid) put_pod(os, t);
    put_pod<std::uint32_t>(os, static_cast<std::uint32_t>(forest.trees.size()));
    for (const SurvivalTree& tree : forest.trees) {
        put_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tree.nodes.size()));
        for (const TreeNode& nd : tree.nodes) {
            put_pod(os, nd.feature);
            put_pod(os, nd.threshold);
            put_pod(os, nd.left);
            put_pod(os, nd.right);
            put_pod<std::uint32_t>(os, static_cast<std::uint32_t>(nd.chf.size()));
            for (double v : nd.chf) put_pod(os, v);
        }
    }
    if (!os) throw std::runtime_error("forest blob: write failed");
}

Forest load_forest(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kForestMagic, 4) != 0)
        throw std::runtime_error("forest blob: bad magic, expected RSF1");
    Forest forest;
    const auto grid_size = get_pod<std::uint32_t>(is);
    forest.event_time_grid.resize(grid_size);
    for (auto& t : forest.event_time_grid) t = get_pod<double>(is);
    const auto n_trees = get_pod<std::uint32_t>(is);
    forest.trees.resize(n_trees);
    for (auto& tree : forest.trees) {
        const auto n_nodes = get_pod<std::uint32_t>(is);
        tree.nodes.resize(n_nodes);
        for (auto& nd : tree.nodes) {
            nd.feature = get_pod<std::int32_t>(is);
            nd.threshold = get_pod<double>(is);
            nd.left = get_pod<std::int32_t>(is);
            nd.right = get_pod<std::int32_t>(is);
            const auto chf_size = get_pod<std::uint32_t>(is);
            nd.chf.resize(chf_size);
            for (auto& v : nd.chf) v = get_pod<double>(is);
        }
    }
    return forest;
}

}  // namespace survmil
