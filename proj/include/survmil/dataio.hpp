#pragma once

#include "survmil/amil.hpp"
#include "survmil/ndgrad.hpp"
#include "survmil/survcore.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace survmil {

/// One manifest row. core_paths are stored as written (relative paths resolve
/// against the manifest's directory). Covariate encoding: sex and smoking are
/// 0/1, stage 1-4, grade 1-3.
struct ManifestRow {
    std::string patient_id;
    double time = 0.0;
    int event = 0;
    double age = 0.0;
    int sex = 0;
    int smoking = 0;
    int stage = 1;
    int grade = 1;
    std::vector<std::string> core_paths;
};

struct Manifest {
    std::filesystem::path dir;  // directory the manifest was read from
    std::vector<ManifestRow> rows;

    std::vector<std::filesystem::path> resolved_core_paths(std::size_t row) const;
};

struct LoadOptions {
    /// When true, rows with missing (empty) values are skipped and counted;
    /// when false they are an error.
    bool exclude_missing = false;
};

struct LoadResult {
    Manifest manifest;
    Cohort cohort;  // covariates = [age, sex, smoking, stage, grade]
    std::size_t skipped_rows = 0;
};

/// Parses and validates a manifest CSV with header
/// patient_id,time,event,age,sex,smoking,stage,grade,core_paths
/// (core_paths semicolon-separated). Errors carry the offending row number.
LoadResult load_manifest(const std::filesystem::path& path, const LoadOptions& options = {});

// Feature files: binary FBAG (magic "FBAG", u32 LE rows, u32 LE cols, f32 LE
// row-major payload), or a headerless numeric CSV grid as a fixture fallback.
Matrix read_feature_file(const std::filesystem::path& path);
void write_feature_file(const std::filesystem::path& path, const Matrix& features);

/// Loads and row-concatenates the cores of one patient into a single bag.
/// All cores must share the feature dimension.
FeatureBag load_bag(const std::string& patient_id,
                    const std::vector<std::filesystem::path>& core_paths);

/// Loads each core as its own bag (ids left equal to the patient id).
std::vector<FeatureBag> load_core_bags(const std::string& patient_id,
                                       const std::vector<std::filesystem::path>& core_paths);

/// A cohort plus (optionally) the per-core bags of every patient, aligned to
/// the cohort records.
struct Dataset {
    Cohort cohort;
    std::vector<std::vector<FeatureBag>> cores;

    bool has_bags() const { return !cores.empty(); }
    std::size_t feature_dim() const;
    /// Patient-level bags: cores concatenated row-wise.
    std::vector<FeatureBag> merged_bags() const;
};

/// Loads the manifest and, when with_bags is set, every referenced feature
/// file. Tabular-only models pass with_bags = false and touch no feature file.
Dataset load_dataset(const std::filesystem::path& manifest_path, bool with_bags,
                     const LoadOptions& options = {});

struct SynthConfig {
    std::size_t n_patients = 200;
    std::size_t cores_per_patient = 3;
    std::size_t patches_min = 20;
    std::size_t patches_max = 60;
    std::size_t feature_dim = 64;
    double signal_fraction = 0.25;  // share of eligible patches carrying signal
    double effect_size = 2.0;       // feature-space magnitude of the latent risk
    double censoring_rate = 0.3;    // expected censored share
    double hazard_scale = 3.0;      // event rate = exp(hazard_scale * u)
    double tabular_rank_corr = 0.5; // latent correlation of stage/grade with u
    std::size_t signal_cores = 0;   // 0 = all cores eligible, else the first k
    std::uint64_t seed = 0;
};

struct SynthResult {
    std::filesystem::path manifest_path;
    Dataset dataset;
    std::vector<double> latent_risk;  // u per patient, aligned to the cohort
};

/// Writes manifest.csv, bags/*.fbag and truth.csv (patient_id,latent_risk)
/// under out_dir. Per patient: latent risk u ~ N(0,1); survival time
/// Exponential with rate exp(hazard_scale*u); censoring time Exponential with
/// a rate solved so the expected censored share equals censoring_rate; signal
/// patches are noise plus effect_size*u along a fixed unit direction; stage
/// and grade discretize latents correlated with u. Identical configs produce
/// byte-identical files.
SynthResult generate_synthetic(const SynthConfig& config,
                               const std::filesystem::path& out_dir);

}  // namespace survmil
