#include "survmil/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace survmil {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
        const std::size_t pos = line.find(sep, start);
        if (pos == std::string::npos) {
            fields.push_back(line.substr(start));
            return fields;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

[[noreturn]] void row_error(std::size_t line_no, const std::string& msg) {
    throw std::invalid_argument("manifest row " + std::to_string(line_no) + ": " + msg);
}

double parse_double(const std::string& s, std::size_t line_no, const char* field) {
    std::size_t consumed = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &consumed);
    } catch (const std::exception&) {
        row_error(line_no, std::string("non-numeric ") + field + " '" + s + "'");
    }
    if (consumed != s.size())
        row_error(line_no, std::string("non-numeric ") + field + " '" + s + "'");
    return v;
}

int parse_int(const std::string& s, std::size_t line_no, const char* field) {
    const double v = parse_double(s, line_no, field);
    const int i = static_cast<int>(v);
    if (static_cast<double>(i) != v)
        row_error(line_no, std::string("expected integer ") + field + " '" + s + "'");
    return i;
}

constexpr const char* kManifestHeader =
    "patient_id,time,event,age,sex,smoking,stage,grade,core_paths";

}  // namespace

std::vector<fs::path> Manifest::resolved_core_paths(std::size_t row) const {
    std::vector<fs::path> out;
    for (const std::string& p : rows[row].core_paths) {
        fs::path path(p);
        out.push_back(path.is_absolute() ? path : dir / path);
    }
    return out;
}

LoadResult load_manifest(const fs::path& path, const LoadOptions& options) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open manifest: " + path.string());

    LoadResult result;
    result.manifest.dir = path.has_parent_path() ? path.parent_path() : fs::path(".");

    std::string line;
    if (!std::getline(in, line))
        throw std::invalid_argument("manifest is empty: " + path.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kManifestHeader)
        throw std::invalid_argument("manifest header mismatch, expected '" +
                                    std::string(kManifestHeader) + "'");

    std::unordered_set<std::string> seen_ids;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split(line, ',');
        if (fields.size() != 9)
            row_error(line_no, "expected 9 columns, got " + std::to_string(fields.size()));

        const bool has_missing =
            std::any_of(fields.begin(), fields.end() - 1,  // core_paths may be empty
                        [](const std::string& f) { return f.empty(); });
        if (has_missing) {
            if (options.exclude_missing) {
                ++result.skipped_rows;
                continue;
            }
            row_error(line_no, "missing value (pass the exclude-missing option to skip such rows)");
        }

        ManifestRow row;
        row.patient_id = fields[0];
        row.time = parse_double(fields[1], line_no, "time");
        row.event = parse_int(fields[2], line_no, "event");
        row.age = parse_double(fields[3], line_no, "age");
        row.sex = parse_int(fields[4], line_no, "sex");
        row.smoking = parse_int(fields[5], line_no, "smoking");
        row.stage = parse_int(fields[6], line_no, "stage");
        row.grade = parse_int(fields[7], line_no, "grade");
        if (!fields[8].empty())
            for (auto& p : split(fields[8], ';'))
                if (!p.empty()) row.core_paths.push_back(p);

        if (!seen_ids.insert(row.patient_id).second)
            row_error(line_no, "duplicate patient_id '" + row.patient_id + "'");
        if (row.time < 0) row_error(line_no, "negative time");
        if (row.event != 0 && row.event != 1) row_error(line_no, "event must be 0 or 1");
        if (row.sex != 0 && row.sex != 1) row_error(line_no, "sex must be coded 0 or 1");
        if (row.smoking != 0 && row.smoking != 1)
            row_error(line_no, "smoking must be coded 0 or 1");
        if (row.stage < 1 || row.stage > 4) row_error(line_no, "stage must be in 1..4");
        if (row.grade < 1 || row.grade > 3) row_error(line_no, "grade must be in 1..3");

        result.manifest.rows.push_back(row);
        const std::size_t r = result.manifest.rows.size() - 1;
        for (const fs::path& p : result.manifest.resolved_core_paths(r))
            if (!fs::exists(p))
                row_error(line_no, "core path does not resolve: " + p.string());

        SurvivalRecord rec;
        rec.patient_id = row.patient_id;
        rec.time = row.time;
        rec.event = row.event;
        rec.covariates = {row.age, static_cast<double>(row.sex),
                          static_cast<double>(row.smoking), static_cast<double>(row.stage),
                          static_cast<double>(row.grade)};
        result.cohort.records.push_back(std::move(rec));
    }
    if (result.cohort.empty())
        throw std::invalid_argument("manifest has no usable rows: " + path.string());
    result.cohort.validate();
    return result;
}

namespace {

constexpr char kBagMagic[4] = {'F', 'B', 'A', 'G'};

std::uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("feature file: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

Matrix read_csv_grid(const fs::path& path) {
    std::ifstream in(path);
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> row;
        for (const std::string& f : split(line, ','))
            row.push_back(parse_double(f, line_no, "feature value"));
        if (!rows.empty() && row.size() != rows.front().size())
            throw std::invalid_argument("feature csv " + path.string() + ": ragged row " +
                                        std::to_string(line_no));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::invalid_argument("feature file is empty: " + path.string());
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
    return m;
}

}  // namespace

Matrix read_feature_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open feature file: " + path.string());
    char magic[4] = {0, 0, 0, 0};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kBagMagic, 4) != 0) return read_csv_grid(path);

    const std::uint32_t rows = read_u32_le(in);
    const std::uint32_t cols = read_u32_le(in);
    if (rows == 0 || cols == 0)
        throw std::invalid_argument("feature file is empty: " + path.string());
    Matrix m(rows, cols);
    std::vector<float> buffer(static_cast<std::size_t>(rows) * cols);
    in.read(reinterpret_cast<char*>(buffer.data()),
            static_cast<std::streamsize>(buffer.size() * sizeof(float)));
    if (!in) throw std::runtime_error("feature file truncated: " + path.string());
    for (std::size_t i = 0; i < buffer.size(); ++i) m.data[i] = static_cast<double>(buffer[i]);
    return m;
}

void write_feature_file(const fs::path& path, const Matrix& features) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write feature file: " + path.string());
    out.write(kBagMagic, 4);
    write_u32_le(out, static_cast<std::uint32_t>(features.rows));
    write_u32_le(out, static_cast<std::uint32_t>(features.cols));
    std::vector<float> buffer(features.data.size());
    for (std::size_t i = 0; i < buffer.size(); ++i)
        buffer[i] = static_cast<float>(features.data[i]);
    out.write(reinterpret_cast<const char*>(buffer.data()),
              static_cast<std::streamsize>(buffer.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

FeatureBag load_bag(const std::string& patient_id, const std::vector<fs::path>& core_paths) {
    if (core_paths.empty())
        throw std::invalid_argument("patient " + patient_id + " has no core paths");
    std::vector<Matrix> cores;
    std::size_t total_rows = 0;
    for (const fs::path& p : core_paths) {
        cores.push_back(read_feature_file(p));
        if (cores.back().cols != cores.front().cols)
            throw std::invalid_argument("feature dim mismatch across cores of " + patient_id +
                                        " at " + p.string());
        total_rows += cores.back().rows;
    }
    FeatureBag bag;
    bag.patient_id = patient_id;
    bag.features = Matrix(total_rows, cores.front().cols);
    std::size_t row = 0;
    for (const Matrix& core : cores) {
        std::copy(core.data.begin(), core.data.end(), bag.features.data.begin() + row * bag.features.cols);
        row += core.rows;
    }
    return bag;
}

std::vector<FeatureBag> load_core_bags(const std::string& patient_id,
                                       const std::vector<fs::path>& core_paths) {
    if (core_paths.empty())
        throw std::invalid_argument("patient " + patient_id + " has no core paths");
    std::vector<FeatureBag> bags;
    for (const fs::path& p : core_paths) {
        FeatureBag bag;
        bag.patient_id = patient_id;
        bag.features = read_feature_file(p);
        if (!bags.empty() && bag.features.cols != bags.front().features.cols)
            throw std::invalid_argument("feature dim mismatch across cores of " + patient_id +
                                        " at " + p.string());
        bags.push_back(std::move(bag));
    }
    return bags;
}

std::size_t Dataset::feature_dim() const {
    for (const auto& patient_cores : cores)
        for (const auto& bag : patient_cores) return bag.features.cols;
    return 0;
}

std::vector<FeatureBag> Dataset::merged_bags() const {
    std::vector<FeatureBag> bags;
    bags.reserve(cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto& patient_cores = cores[i];
        if (patient_cores.empty())
            throw std::invalid_argument("patient " + cohort.records[i].patient_id +
                                        " has no cores");
        std::size_t total_rows = 0;
        for (const auto& c : patient_cores) total_rows += c.features.rows;
        FeatureBag bag;
        bag.patient_id = cohort.records[i].patient_id;
        bag.features = Matrix(total_rows, patient_cores.front().features.cols);
        std::size_t row = 0;
        for (const auto& c : patient_cores) {
            std::copy(c.features.data.begin(), c.features.data.end(),
                      bag.features.data.begin() + row * bag.features.cols);
            row += c.features.rows;
        }
        bags.push_back(std::move(bag));
    }
    return bags;
}

Dataset load_dataset(const fs::path& manifest_path, bool with_bags, const LoadOptions& options) {
    LoadResult loaded = load_manifest(manifest_path, options);
    Dataset ds;
    ds.cohort = std::move(loaded.cohort);
    if (with_bags) {
        ds.cores.resize(ds.cohort.size());
        for (std::size_t i = 0; i < ds.cohort.size(); ++i) {
            const auto paths = loaded.manifest.resolved_core_paths(i);
            ds.cores[i] = load_core_bags(ds.cohort.records[i].patient_id, paths);
            for (const auto& bag : ds.cores[i])
                if (bag.features.cols != ds.feature_dim())
                    throw std::invalid_argument("feature dim mismatch in manifest at patient " +
                                                ds.cohort.records[i].patient_id);
        }
    }
    return ds;
}

namespace {

// Expected censored share for censoring rate c against event rates
// exp(hazard_scale * u), u ~ N(0,1): E[c / (c + exp(s u))], via Gauss-Hermite.
double expected_censored_share(double c, double hazard_scale) {
    // 20-node Gauss-Hermite abscissas/weights for weight exp(-x^2).
    static const double nodes[10] = {0.2453407083009012, 0.7374737285453944,
                                     1.2340762153953231, 1.7385377121165861,
                                     2.2549740020892757, 2.7888060584281305,
                                     3.3478545673832163, 3.9447640401156252,
                                     4.6036824495507442, 5.3874808900112328};
    static const double weights[10] = {4.6224366960061007e-01, 2.8667550536283409e-01,
                                       1.0901720602002457e-01, 2.4810520887463608e-02,
                                       3.2437733422378567e-03, 2.2833863601635774e-04,
                                       7.8025564785320787e-06, 1.0860693707692783e-07,
                                       4.3993409922731805e-10, 2.2293936455341510e-13};
    const double inv_sqrt_pi = 0.5641895835477563;
    double total = 0.0;
    for (int i = 0; i < 10; ++i) {
        const double u_pos = nodes[i] * std::sqrt(2.0);
        for (const double u : {u_pos, -u_pos}) {
            const double rate = std::exp(hazard_scale * u);
            total += weights[i] * (c / (c + rate));
        }
    }
    return total * inv_sqrt_pi;
}

double solve_censoring_rate(double target, double hazard_scale) {
    double lo = 1e-12, hi = 1e12;
    for (int iter = 0; iter < 200; ++iter) {
        const double mid = std::sqrt(lo * hi);
        if (expected_censored_share(mid, hazard_scale) < target)
            lo = mid;
        else
            hi = mid;
    }
    return std::sqrt(lo * hi);
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

SynthResult generate_synthetic(const SynthConfig& config, const fs::path& out_dir) {
    if (config.n_patients < 1 || config.cores_per_patient < 1 || config.patches_min < 1 ||
        config.patches_max < config.patches_min || config.feature_dim < 1)
        throw std::invalid_argument("generate_synthetic: counts must be >= 1 and ranges ordered");
    if (config.signal_fraction < 0 || config.signal_fraction > 1)
        throw std::invalid_argument("generate_synthetic: signal_fraction must be in [0,1]");
    if (config.censoring_rate < 0 || config.censoring_rate >= 1)
        throw std::invalid_argument("generate_synthetic: censoring_rate must be in [0,1)");
    if (config.signal_cores > config.cores_per_patient)
        throw std::invalid_argument("generate_synthetic: signal_cores exceeds cores_per_patient");

    fs::create_directories(out_dir / "bags");

    std::mt19937_64 rng(derive_seed(config.seed, 0xA11CE));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> patch_count(config.patches_min,
                                                           config.patches_max);

    const double censor_rate_param =
        config.censoring_rate > 0 ? solve_censoring_rate(config.censoring_rate,
                                                         config.hazard_scale)
                                  : 0.0;
    // Fixed unit signal direction.
    const double dir = 1.0 / std::sqrt(static_cast<double>(config.feature_dim));
    const double rho = std::clamp(config.tabular_rank_corr, -0.999, 0.999);
    const double rho_tail = std::sqrt(1.0 - rho * rho);

    std::ofstream manifest(out_dir / "manifest.csv");
    std::ofstream truth(out_dir / "truth.csv");
    if (!manifest || !truth)
        throw std::runtime_error("cannot write into " + out_dir.string());
    manifest << kManifestHeader << "\n";
    truth << "patient_id,latent_risk\n";

    SynthResult result;
    result.manifest_path = out_dir / "manifest.csv";
    result.dataset.cores.resize(config.n_patients);

    for (std::size_t i = 0; i < config.n_patients; ++i) {
        char id_buf[16];
        std::snprintf(id_buf, sizeof(id_buf), "P%05zu", i + 1);
        const std::string pid(id_buf);

        const double u = normal(rng);
        const double event_rate = std::exp(config.hazard_scale * u);
        const double survival_time = -std::log1p(-uniform(rng)) / event_rate;
        double observed_time = survival_time;
        int event = 1;
        if (censor_rate_param > 0) {
            const double censor_time = -std::log1p(-uniform(rng)) / censor_rate_param;
            if (censor_time < survival_time) {
                observed_time = censor_time;
                event = 0;
            }
        }

        const double age = 65.0 + 8.0 * normal(rng);
        const int sex = uniform(rng) < 0.5 ? 0 : 1;
        const int smoking = uniform(rng) < 0.55 ? 1 : 0;
        const double stage_latent = rho * u + rho_tail * normal(rng);
        const double grade_latent = rho * u + rho_tail * normal(rng);
        // Normal quantiles at 25/55/85% and 30/70%.
        const int stage = stage_latent < -0.6744897501960817 ? 1
                          : stage_latent < 0.12566134685507402 ? 2
                          : stage_latent < 1.0364333894937898  ? 3
                                                               : 4;
        const int grade = grade_latent < -0.5244005127080407 ? 1
                          : grade_latent < 0.5244005127080407 ? 2
                                                              : 3;

        std::vector<std::string> core_names;
        auto& patient_cores = result.dataset.cores[i];
        for (std::size_t core = 0; core < config.cores_per_patient; ++core) {
            const std::size_t m = patch_count(rng);
            Matrix features(m, config.feature_dim);
            const bool eligible = config.signal_cores == 0 || core < config.signal_cores;
            for (std::size_t patch = 0; patch < m; ++patch) {
                for (std::size_t c = 0; c < config.feature_dim; ++c)
                    features(patch, c) = normal(rng);
                if (eligible && uniform(rng) < config.signal_fraction) {
                    const double shift = config.effect_size * u * dir;
                    for (std::size_t c = 0; c < config.feature_dim; ++c)
                        features(patch, c) += shift;
                }
            }
            char core_buf[48];
            std::snprintf(core_buf, sizeof(core_buf), "bags/%s_c%zu.fbag", pid.c_str(), core);
            write_feature_file(out_dir / core_buf, features);
            core_names.emplace_back(core_buf);

            FeatureBag bag;
            bag.patient_id = pid;
            bag.features = std::move(features);
            patient_cores.push_back(std::move(bag));
        }

        manifest << pid << ',' << format_double(observed_time) << ',' << event << ','
                 << format_double(age) << ',' << sex << ',' << smoking << ',' << stage << ','
                 << grade << ',';
        for (std::size_t c = 0; c < core_names.size(); ++c)
            manifest << (c ? ";" : "") << core_names[c];
        manifest << "\n";
        truth << pid << ',' << format_double(u) << "\n";

        SurvivalRecord rec;
        rec.patient_id = pid;
        rec.time = observed_time;
        rec.event = event;
        rec.covariates = {age, static_cast<double>(sex), static_cast<double>(smoking),
                          static_cast<double>(stage), static_cast<double>(grade)};
        result.dataset.cohort.records.push_back(std::move(rec));
        result.latent_risk.push_back(u);
    }
    if (!manifest || !truth)
        throw std::runtime_error("write failed in " + out_dir.string());
    return result;
}

}  // namespace survmil
