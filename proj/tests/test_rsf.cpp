#include "survmil/rsf.hpp"

#include "survmil/dataio.hpp"
#include "testutil.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

using namespace survmil;

namespace {

Cohort make_cohort(const std::vector<double>& times, const std::vector<int>& events,
                   const std::vector<std::vector<double>>& covs) {
    Cohort c;
    for (std::size_t i = 0; i < times.size(); ++i)
        c.records.push_back({"P" + std::to_string(i), times[i], events[i], covs[i]});
    return c;
}

// Two clearly separated groups: feature 0 tells early deaths from late ones,
// feature 1 is noise.
Cohort separated_cohort(std::size_t per_group, std::mt19937_64& rng) {
    std::normal_distribution<double> noise(0.0, 1.0);
    Cohort c;
    for (std::size_t i = 0; i < per_group; ++i) {
        c.records.push_back({"E" + std::to_string(i), 1.0 + static_cast<double>(i), 1,
                             {0.0, noise(rng)}});
        c.records.push_back({"L" + std::to_string(i), 100.0 + static_cast<double>(i), 1,
                             {1.0, noise(rng)}});
    }
    return c;
}

}  // namespace

TEST_CASE("nelson-aalen on grid hand values") {
    const std::vector<double> times{1, 2, 3};
    const std::vector<int> events{1, 1, 1};
    const std::vector<double> grid{1, 2, 3};
    const auto chf = nelson_aalen_on_grid(times, events, grid);
    REQUIRE(chf.size() == 3);
    CHECK(chf[0] == doctest::Approx(1.0 / 3).epsilon(1e-15));
    CHECK(chf[1] == doctest::Approx(1.0 / 3 + 0.5).epsilon(1e-15));
    CHECK(chf[2] == doctest::Approx(1.0 / 3 + 0.5 + 1.0).epsilon(1e-15));

    // Censoring reduces the risk set without adding hazard.
    const std::vector<int> censored{1, 0, 1};
    const auto chf2 = nelson_aalen_on_grid(times, censored, std::vector<double>{1, 3});
    CHECK(chf2[0] == doctest::Approx(1.0 / 3).epsilon(1e-15));
    CHECK(chf2[1] == doctest::Approx(1.0 / 3 + 1.0).epsilon(1e-15));
}

TEST_CASE("single-leaf forest predicts the cohort mortality everywhere") {
    std::mt19937_64 rng(3);
    const Cohort c = separated_cohort(10, rng);
    RsfConfig cfg;
    cfg.n_trees = 1;
    cfg.bootstrap = false;
    cfg.max_depth = 0;
    cfg.seed = 5;
    const Forest forest = fit_forest(c, cfg);
    REQUIRE(forest.trees.size() == 1);
    REQUIRE(forest.trees[0].nodes.size() == 1);

    const auto chf = nelson_aalen_on_grid(c.times(), c.events(), forest.event_time_grid);
    double expected = 0.0;
    for (double v : chf) expected += v;

    const auto mortality = predict_mortality(forest, c).values();
    for (double m : mortality) CHECK(m == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("separating covariate wins the root split in every tree") {
    std::mt19937_64 rng(7);
    const Cohort c = separated_cohort(15, rng);
    RsfConfig cfg;
    cfg.n_trees = 20;
    cfg.mtry = 2;
    cfg.seed = 11;
    const Forest forest = fit_forest(c, cfg);
    for (const SurvivalTree& tree : forest.trees) {
        REQUIRE(tree.nodes.size() >= 3);
        CHECK(tree.nodes[0].feature == 0);
        CHECK(tree.nodes[0].threshold == doctest::Approx(0.5).epsilon(1e-12));
    }
}

TEST_CASE("mortality is monotone in the risky covariate") {
    std::mt19937_64 rng(13);
    const Cohort c = separated_cohort(15, rng);
    RsfConfig cfg;
    cfg.n_trees = 30;
    cfg.seed = 17;
    const Forest forest = fit_forest(c, cfg);
    Matrix probe(2, 2);
    probe(0, 0) = 0.0;  // early-death group
    probe(1, 0) = 1.0;  // late group
    const auto mortality = predict_mortality(forest, probe);
    CHECK(mortality[0] > mortality[1]);
}

TEST_CASE("fixed seed reproduces the forest exactly") {
    std::mt19937_64 rng(19);
    const Cohort c = testutil::random_cohort(rng, 40, true, 0.25, 3);
    RsfConfig cfg;
    cfg.n_trees = 10;
    cfg.seed = 23;
    const Forest f1 = fit_forest(c, cfg);
    const Forest f2 = fit_forest(c, cfg);
    const auto m1 = predict_mortality(f1, c).values();
    const auto m2 = predict_mortality(f2, c).values();
    for (std::size_t i = 0; i < m1.size(); ++i) CHECK(m1[i] == m2[i]);
}

TEST_CASE("fit is invariant under training record permutation") {
    std::mt19937_64 rng(29);
    Cohort c = testutil::random_cohort(rng, 40, true, 0.25, 3);
    RsfConfig cfg;
    cfg.n_trees = 8;
    cfg.seed = 31;
    const Forest f1 = fit_forest(c, cfg);
    Cohort shuffled = c;
    std::shuffle(shuffled.records.begin(), shuffled.records.end(), rng);
    const Forest f2 = fit_forest(shuffled, cfg);
    const auto m1 = predict_mortality(f1, c).values();
    const auto m2 = predict_mortality(f2, c).values();
    for (std::size_t i = 0; i < m1.size(); ++i) CHECK(m1[i] == m2[i]);
}

TEST_CASE("constant covariates give single-leaf trees, not failure") {
    Cohort c = make_cohort({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16},
                           {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1},
                           std::vector<std::vector<double>>(16, {2.5, 2.5}));
    RsfConfig cfg;
    cfg.n_trees = 5;
    cfg.seed = 37;
    const Forest forest = fit_forest(c, cfg);
    for (const SurvivalTree& tree : forest.trees) CHECK(tree.nodes.size() == 1);
    const auto mortality = predict_mortality(forest, c).values();
    for (double m : mortality) CHECK(m == mortality.front());
}

TEST_CASE("forest blob round-trips through serialization") {
    std::mt19937_64 rng(41);
    const Cohort c = testutil::random_cohort(rng, 30, true, 0.3, 2);
    RsfConfig cfg;
    cfg.n_trees = 6;
    cfg.seed = 43;
    const Forest forest = fit_forest(c, cfg);
    std::stringstream blob;
    save_forest(blob, forest);
    const Forest loaded = load_forest(blob);
    const auto m1 = predict_mortality(forest, c).values();
    const auto m2 = predict_mortality(loaded, c).values();
    for (std::size_t i = 0; i < m1.size(); ++i) CHECK(m1[i] == m2[i]);

    std::stringstream bad("NOPE");
    CHECK_THROWS_AS(load_forest(bad), std::runtime_error);
}

TEST_CASE("forest recovers planted tabular signal") {
    SynthConfig synth;
    synth.n_patients = 160;
    synth.cores_per_patient = 1;
    synth.patches_min = 1;
    synth.patches_max = 1;
    synth.feature_dim = 2;
    synth.seed = 47;
    const auto tmp = std::filesystem::temp_directory_path() / "survmil_rsf_signal";
    std::filesystem::remove_all(tmp);
    const SynthResult synth_result = generate_synthetic(synth, tmp);
    const Cohort& full = synth_result.dataset.cohort;

    Cohort train, test;
    for (std::size_t i = 0; i < full.size(); ++i)
        (i % 2 == 0 ? train : test).records.push_back(full.records[i]);

    RsfConfig cfg;
    cfg.n_trees = 100;
    cfg.seed = 53;
    const Forest forest = fit_forest(train, cfg);
    const auto risks = predict_mortality(forest, test).values();
    const auto c = c_index(test.times(), test.events(), risks);
    CHECK(c.c_index > 0.6);
    std::filesystem::remove_all(tmp);
}

TEST_CASE("preconditions are enforced") {
    Cohort no_cov;
    no_cov.records.push_back({"a", 1.0, 1, {}});
    CHECK_THROWS_AS(fit_forest(no_cov), std::invalid_argument);

    Cohort no_events = make_cohort({1, 2}, {0, 0}, {{1.0}, {2.0}});
    CHECK_THROWS_AS(fit_forest(no_events), std::invalid_argument);

    Cohort ok = make_cohort({1, 2}, {1, 1}, {{1.0}, {2.0}});
    RsfConfig bad;
    bad.mtry = 5;
    CHECK_THROWS_AS(fit_forest(ok, bad), std::invalid_argument);
}
