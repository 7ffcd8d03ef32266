#include "survmil/dataio.hpp"

#include "testutil.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace survmil;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_text(const fs::path& p, const std::string& content) {
    std::ofstream out(p);
    out << content;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

Matrix float_valued_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
    Matrix m = testutil::random_matrix(rng, rows, cols);
    for (double& v : m.data) v = static_cast<double>(static_cast<float>(v));
    return m;
}

}  // namespace

TEST_CASE("feature file round-trips bitwise") {
    TempDir dir("survmil_fbag");
    std::mt19937_64 rng(3);
    const Matrix m = float_valued_matrix(rng, 7, 5);
    write_feature_file(dir.path / "a.fbag", m);
    const Matrix back = read_feature_file(dir.path / "a.fbag");
    REQUIRE(back.rows == m.rows);
    REQUIRE(back.cols == m.cols);
    for (std::size_t i = 0; i < m.data.size(); ++i) CHECK(back.data[i] == m.data[i]);
}

TEST_CASE("csv grids are accepted as a fixture fallback") {
    TempDir dir("survmil_csvgrid");
    write_text(dir.path / "grid.csv", "1,2,3\n4,5,6\n");
    const Matrix m = read_feature_file(dir.path / "grid.csv");
    REQUIRE(m.rows == 2);
    REQUIRE(m.cols == 3);
    CHECK(m(1, 2) == 6.0);

    write_text(dir.path / "ragged.csv", "1,2\n3\n");
    CHECK_THROWS_AS(read_feature_file(dir.path / "ragged.csv"), std::invalid_argument);
    write_text(dir.path / "empty.csv", "");
    CHECK_THROWS_AS(read_feature_file(dir.path / "empty.csv"), std::invalid_argument);
}

TEST_CASE("manifest parsing accepts a minimal valid file") {
    TempDir dir("survmil_manifest_ok");
    write_text(dir.path / "b1.csv", "1,2\n");
    write_text(dir.path / "m.csv",
               "patient_id,time,event,age,sex,smoking,stage,grade,core_paths\n"
               "A,5.5,1,63,0,1,2,1,b1.csv\n"
               "B,2.25,0,71,1,0,4,3,b1.csv\n");
    const LoadResult r = load_manifest(dir.path / "m.csv");
    REQUIRE(r.cohort.size() == 2);
    CHECK(r.skipped_rows == 0);
    CHECK(r.cohort.records[0].patient_id == "A");
    CHECK(r.cohort.records[0].time == 5.5);
    CHECK(r.cohort.records[1].event == 0);
    CHECK(r.cohort.records[0].covariates == std::vector<double>{63, 0, 1, 2, 1});
    CHECK(r.manifest.resolved_core_paths(0).front() == dir.path / "b1.csv");
}

TEST_CASE("manifest errors carry row context") {
    TempDir dir("survmil_manifest_err");
    write_text(dir.path / "b1.csv", "1,2\n");
    const std::string header = "patient_id,time,event,age,sex,smoking,stage,grade,core_paths\n";

    write_text(dir.path / "dup.csv", header + "A,1,1,60,0,0,1,1,b1.csv\nA,2,0,61,1,1,2,2,b1.csv\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir.path / "dup.csv"),
                         doctest::Contains("duplicate patient_id 'A'"), std::invalid_argument);

    write_text(dir.path / "cols.csv", header + "A,1,1,60,0,0,1,1\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir.path / "cols.csv"),
                         doctest::Contains("row 2"), std::invalid_argument);

    write_text(dir.path / "stage.csv", header + "A,1,1,60,0,0,7,1,b1.csv\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir.path / "stage.csv"),
                         doctest::Contains("stage"), std::invalid_argument);

    write_text(dir.path / "numeric.csv", header + "A,abc,1,60,0,0,1,1,b1.csv\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir.path / "numeric.csv"),
                         doctest::Contains("non-numeric time"), std::invalid_argument);

    write_text(dir.path / "path.csv", header + "A,1,1,60,0,0,1,1,missing.fbag\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir.path / "path.csv"),
                         doctest::Contains("does not resolve"), std::invalid_argument);

    write_text(dir.path / "badheader.csv", "id,time\nA,1\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir.path / "badheader.csv"),
                         doctest::Contains("header"), std::invalid_argument);
}

TEST_CASE("missing values are rejected or skipped per the flag") {
    TempDir dir("survmil_manifest_missing");
    write_text(dir.path / "b1.csv", "1,2\n");
    const std::string header = "patient_id,time,event,age,sex,smoking,stage,grade,core_paths\n";
    write_text(dir.path / "m.csv",
               header + "A,1,1,60,0,0,1,,b1.csv\nB,2,1,65,1,0,2,2,b1.csv\n");

    CHECK_THROWS_WITH_AS(load_manifest(dir.path / "m.csv"), doctest::Contains("missing value"),
                         std::invalid_argument);

    LoadOptions opts;
    opts.exclude_missing = true;
    const LoadResult r = load_manifest(dir.path / "m.csv", opts);
    CHECK(r.cohort.size() == 1);
    CHECK(r.skipped_rows == 1);
    CHECK(r.cohort.records[0].patient_id == "B");
}

TEST_CASE("bags concatenate cores row-wise") {
    TempDir dir("survmil_bags");
    std::mt19937_64 rng(5);
    const Matrix c0 = float_valued_matrix(rng, 5, 4);
    const Matrix c1 = float_valued_matrix(rng, 5, 4);
    const Matrix c2 = float_valued_matrix(rng, 5, 4);
    write_feature_file(dir.path / "c0.fbag", c0);
    write_feature_file(dir.path / "c1.fbag", c1);
    write_feature_file(dir.path / "c2.fbag", c2);

    const FeatureBag one = load_bag("p", {dir.path / "c0.fbag"});
    CHECK(one.features.rows == 5);

    const FeatureBag three =
        load_bag("p", {dir.path / "c0.fbag", dir.path / "c1.fbag", dir.path / "c2.fbag"});
    REQUIRE(three.features.rows == 15);
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(three.features(0, c) == c0(0, c));
        CHECK(three.features(5, c) == c1(0, c));
        CHECK(three.features(14, c) == c2(4, c));
    }

    const Matrix wrong = float_valued_matrix(rng, 2, 3);
    write_feature_file(dir.path / "wrong.fbag", wrong);
    CHECK_THROWS_WITH_AS(load_bag("p", {dir.path / "c0.fbag", dir.path / "wrong.fbag"}),
                         doctest::Contains("dim mismatch"), std::invalid_argument);
}

TEST_CASE("core order does not change model output") {
    TempDir dir("survmil_core_order");
    std::mt19937_64 rng(7);
    const Matrix c0 = float_valued_matrix(rng, 4, 8);
    const Matrix c1 = float_valued_matrix(rng, 6, 8);
    write_feature_file(dir.path / "c0.fbag", c0);
    write_feature_file(dir.path / "c1.fbag", c1);

    FeatureBag forward = load_bag("p", {dir.path / "c0.fbag", dir.path / "c1.fbag"});
    FeatureBag reversed = load_bag("p", {dir.path / "c1.fbag", dir.path / "c0.fbag"});

    AmilConfig cfg;
    cfg.feature_dim = 8;
    cfg.proj_dim = 12;
    cfg.attn_dim = 6;
    AmilParams params(cfg, 9);
    const double r1 = amil_forward(params, forward).log_risk;
    const double r2 = amil_forward(params, reversed).log_risk;
    CHECK(std::abs(r1 - r2) <= 1e-12);
}

TEST_CASE("generator respects censoring_rate zero") {
    TempDir dir("survmil_synth_nocensor");
    SynthConfig cfg;
    cfg.n_patients = 30;
    cfg.patches_min = 2;
    cfg.patches_max = 3;
    cfg.feature_dim = 4;
    cfg.censoring_rate = 0.0;
    cfg.seed = 11;
    const SynthResult r = generate_synthetic(cfg, dir.path);
    CHECK(r.dataset.cohort.n_events() == 30);
}

TEST_CASE("generator censoring share lands near the target") {
    TempDir dir("survmil_synth_censor");
    SynthConfig cfg;
    cfg.n_patients = 400;
    cfg.cores_per_patient = 1;
    cfg.patches_min = 1;
    cfg.patches_max = 1;
    cfg.feature_dim = 2;
    cfg.censoring_rate = 0.3;
    cfg.seed = 13;
    const SynthResult r = generate_synthetic(cfg, dir.path);
    const double share =
        1.0 - static_cast<double>(r.dataset.cohort.n_events()) / r.dataset.cohort.size();
    CHECK(share == doctest::Approx(0.3).epsilon(0.25));  // binomial noise at n=400
}

TEST_CASE("generator is byte-identical for identical configs") {
    TempDir d1("survmil_synth_det1");
    TempDir d2("survmil_synth_det2");
    SynthConfig cfg;
    cfg.n_patients = 12;
    cfg.patches_min = 2;
    cfg.patches_max = 4;
    cfg.feature_dim = 6;
    cfg.seed = 17;
    generate_synthetic(cfg, d1.path);
    generate_synthetic(cfg, d2.path);
    CHECK(read_bytes(d1.path / "manifest.csv") == read_bytes(d2.path / "manifest.csv"));
    CHECK(read_bytes(d1.path / "truth.csv") == read_bytes(d2.path / "truth.csv"));
    CHECK(read_bytes(d1.path / "bags/P00001_c0.fbag") ==
          read_bytes(d2.path / "bags/P00001_c0.fbag"));
    CHECK(read_bytes(d1.path / "bags/P00012_c2.fbag") ==
          read_bytes(d2.path / "bags/P00012_c2.fbag"));
}

TEST_CASE("generated files reload into the identical dataset") {
    TempDir dir("survmil_synth_reload");
    SynthConfig cfg;
    cfg.n_patients = 10;
    cfg.patches_min = 2;
    cfg.patches_max = 3;
    cfg.feature_dim = 5;
    cfg.seed = 19;
    const SynthResult r = generate_synthetic(cfg, dir.path);
    const Dataset loaded = load_dataset(r.manifest_path, true);
    REQUIRE(loaded.cohort.size() == 10);
    for (std::size_t i = 0; i < loaded.cohort.size(); ++i) {
        CHECK(loaded.cohort.records[i].patient_id == r.dataset.cohort.records[i].patient_id);
        CHECK(loaded.cohort.records[i].time == r.dataset.cohort.records[i].time);
        REQUIRE(loaded.cores[i].size() == 3);
        for (std::size_t k = 0; k < 3; ++k) {
            const Matrix& a = loaded.cores[i][k].features;
            const Matrix& b = r.dataset.cores[i][k].features;
            REQUIRE(a.rows == b.rows);
            for (std::size_t q = 0; q < a.data.size(); ++q)
                CHECK(a.data[q] == doctest::Approx(b.data[q]).epsilon(1e-7));  // f32 storage
        }
    }
}

TEST_CASE("latent risk orders survival times downward") {
    TempDir dir("survmil_synth_kendall");
    SynthConfig cfg;
    cfg.n_patients = 120;
    cfg.cores_per_patient = 1;
    cfg.patches_min = 1;
    cfg.patches_max = 1;
    cfg.feature_dim = 2;
    cfg.seed = 23;
    const SynthResult r = generate_synthetic(cfg, dir.path);
    double concordant = 0, discordant = 0;
    const auto& records = r.dataset.cohort.records;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].event != 1) continue;
        for (std::size_t j = i + 1; j < records.size(); ++j) {
            if (records[j].event != 1) continue;
            const double du = r.latent_risk[i] - r.latent_risk[j];
            const double dt = records[i].time - records[j].time;
            if (du * dt < 0) ++concordant;
            else if (du * dt > 0) ++discordant;
        }
    }
    const double kendall = (concordant - discordant) / (concordant + discordant);
    CHECK(kendall > 0.3);  // u up, time down
}

TEST_CASE("signal can be confined to the first core") {
    TempDir dir("survmil_synth_cores");
    SynthConfig cfg;
    cfg.n_patients = 40;
    cfg.cores_per_patient = 3;
    cfg.patches_min = 10;
    cfg.patches_max = 10;
    cfg.feature_dim = 16;
    cfg.signal_fraction = 1.0;
    cfg.effect_size = 6.0;
    cfg.signal_cores = 1;
    cfg.seed = 29;
    const SynthResult r = generate_synthetic(cfg, dir.path);
    const double dir_component = 1.0 / std::sqrt(16.0);
    double core0 = 0.0, others = 0.0;
    for (std::size_t i = 0; i < r.dataset.cohort.size(); ++i) {
        for (std::size_t k = 0; k < 3; ++k) {
            const Matrix& f = r.dataset.cores[i][k].features;
            double mean_proj = 0.0;
            for (std::size_t row = 0; row < f.rows; ++row)
                for (std::size_t c = 0; c < f.cols; ++c)
                    mean_proj += f(row, c) * dir_component;
            mean_proj /= static_cast<double>(f.rows);
            if (k == 0)
                core0 += std::abs(mean_proj);
            else
                others += 0.5 * std::abs(mean_proj);
        }
    }
    CHECK(core0 > 2.0 * others);
}

TEST_CASE("generator validates its configuration") {
    TempDir dir("survmil_synth_bad");
    SynthConfig bad;
    bad.patches_min = 5;
    bad.patches_max = 2;
    CHECK_THROWS_AS(generate_synthetic(bad, dir.path), std::invalid_argument);
    SynthConfig censor;
    censor.censoring_rate = 1.0;
    CHECK_THROWS_AS(generate_synthetic(censor, dir.path), std::invalid_argument);
    SynthConfig cores;
    cores.signal_cores = 9;
    CHECK_THROWS_AS(generate_synthetic(cores, dir.path), std::invalid_argument);
}
