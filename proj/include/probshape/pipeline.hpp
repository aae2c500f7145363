#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "probshape/experiment.hpp"

namespace probshape {

// Every knob of the pipeline. Serialized as one JSON object with flat dotted
// keys ("data.train_count", "train.lr", ...); see configs/desk.json.
struct PipelineConfig {
    std::uint64_t seed = 1;
    ExperimentConfig experiment;
    std::size_t entropy_draws = 32;  // Monte-Carlo draws per heat map
    std::size_t heatmap_samples = 2; // heat maps per test set

    void validate() const; // ConfigError

    // Unknown keys and wrong types throw ConfigError naming the key.
    static PipelineConfig from_json_text(const std::string &text, const std::string &source);
    std::string to_json_text() const;
    // Canonical text of the keys starting with any of `prefixes`.
    std::string section_text(const std::vector<std::string_view> &prefixes) const;
    static std::vector<std::string> keys();
};

PipelineConfig load_pipeline_config(const std::filesystem::path &path);

enum class Stage { Generate, Augment, Train, Infer, Evaluate, Report };

std::string_view stage_name(Stage stage);
const std::vector<Stage> &all_stages();

struct RunOptions {
    std::filesystem::path out_dir;
    bool force = false;
    std::ostream *log = nullptr;
};

enum class StageOutcome { Ran, UpToDate };

// Runs one stage after checking that its upstream outputs exist. A stage whose
// inputs and outputs hash to its recorded stamp is skipped unless forced.
StageOutcome run_stage(Stage stage, const PipelineConfig &cfg, const RunOptions &opts);
void run_all(const PipelineConfig &cfg, const RunOptions &opts);

// Exclusive lock file in the output directory; held for the object lifetime.
class OutputLock {
public:
    explicit OutputLock(const std::filesystem::path &out_dir);
    ~OutputLock();
    OutputLock(const OutputLock &) = delete;
    OutputLock &operator=(const OutputLock &) = delete;

private:
    std::filesystem::path path_;
};

class LockError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Output directory: explicit value, else $PROBSHAPE_OUT_DIR, else ./probshape_out.
std::filesystem::path resolve_out_dir(const std::string &explicit_dir);

std::string version_text();

// FNV-1a 64 of a byte string and of every regular file under a directory
// (sorted relative paths plus contents), skipping `exclude` file names.
std::uint64_t content_hash(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t directory_hash(const std::filesystem::path &dir, std::string_view exclude);

} // namespace probshape
