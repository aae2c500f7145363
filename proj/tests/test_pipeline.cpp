#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "probshape/error.hpp"
#include "probshape/pipeline.hpp"
#include "test_support.hpp"

using namespace probshape;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

PipelineConfig tiny() { return load_pipeline_config(fs::path(PROBSHAPE_SOURCE_DIR) / "configs" / "tiny.json"); }

std::string error_of(const std::string &text) {
    try {
        PipelineConfig::from_json_text(text, "inline");
    } catch (const ConfigError &e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST_CASE("pipeline config text round trip") {
    const PipelineConfig a = tiny();
    CHECK(a.seed == 11);
    CHECK(a.experiment.data.train_count == 8);
    const PipelineConfig b = PipelineConfig::from_json_text(a.to_json_text(), "round trip");
    CHECK(b.to_json_text() == a.to_json_text());
    CHECK(PipelineConfig::from_json_text("{}", "empty").to_json_text() == PipelineConfig{}.to_json_text());
    for (const auto &k : PipelineConfig::keys()) CHECK(a.to_json_text().find("\"" + k + "\"") != std::string::npos);
    CHECK(a.section_text({"train."}) != a.section_text({"net."}));
}

TEST_CASE("pipeline config errors name the key") {
    CHECK(error_of(R"({"train.learning_rate": 0.1})").find("train.learning_rate") != std::string::npos);
    CHECK(error_of(R"({"train.epochs": "many"})").find("train.epochs") != std::string::npos);
    CHECK(error_of(R"({"net.dropout": 1.5})").find("dropout") != std::string::npos);
    CHECK(error_of("[1, 2]") != "");
    CHECK(error_of("{not json") != "");
    CHECK_THROWS_AS(load_pipeline_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("output directory resolution and version text") {
    CHECK(resolve_out_dir("given") == fs::path("given"));
    ::setenv("PROBSHAPE_OUT_DIR", "/tmp/from_env", 1);
    CHECK(resolve_out_dir("") == fs::path("/tmp/from_env"));
    ::unsetenv("PROBSHAPE_OUT_DIR");
    CHECK(resolve_out_dir("") == fs::path("probshape_out"));
    CHECK(version_text().find("PSVOL1") != std::string::npos);
}

TEST_CASE("output lock is exclusive") {
    const auto dir = test::scratch_dir("lock");
    {
        OutputLock a(dir);
        CHECK(fs::exists(dir / ".probshape.lock"));
        CHECK_THROWS_AS(OutputLock{dir}, LockError);
    }
    CHECK_FALSE(fs::exists(dir / ".probshape.lock"));
    CHECK_NOTHROW(OutputLock{dir});
}

TEST_CASE("content hashes") {
    CHECK(content_hash("") == 0xcbf29ce484222325ULL);
    CHECK(content_hash("a") == 0xaf63dc4c8601ec8cULL);
    const auto dir = test::scratch_dir("hash");
    std::ofstream(dir / "x.txt") << "one";
    std::ofstream(dir / "stamp.txt") << "ignored";
    const auto h = directory_hash(dir, "stamp.txt");
    std::ofstream(dir / "stamp.txt") << "changed";
    CHECK(directory_hash(dir, "stamp.txt") == h);
    std::ofstream(dir / "x.txt") << "two";
    CHECK(directory_hash(dir, "stamp.txt") != h);
}

TEST_CASE("stages need their upstream outputs") {
    const auto dir = test::scratch_dir("missing");
    RunOptions opts{dir, false, nullptr};
    CHECK_THROWS_AS(run_stage(Stage::Train, tiny(), opts), DataError);
    CHECK_THROWS_AS(run_stage(Stage::Report, tiny(), opts), DataError);
}

TEST_CASE("tiny pipeline: artifacts, up-to-date checks and determinism") {
    const auto a = test::scratch_dir("run_a");
    const auto b = test::scratch_dir("run_b");
    const PipelineConfig cfg = tiny();
    run_all(cfg, {a, false, nullptr});
    run_all(cfg, {b, false, nullptr});

    for (const char *f : {"generate/sets.csv", "augment/pca.bin", "augment/kde.json", "augment/manifest_train.txt",
                          "train/uncertain.psnet", "train/baseline.psnet", "infer/predictions_uncertain.csv",
                          "infer/mean_mesh.off", "evaluate/report.csv", "evaluate/report.json", "report/summary.md",
                          "report/boxplot.csv", "report/scatter.csv"}) {
        CAPTURE(f);
        CHECK(fs::exists(a / f));
    }
    for (const char *f : {"evaluate/report.csv", "evaluate/report.json", "report/summary.md", "report/scatter.csv"}) {
        CAPTURE(f);
        CHECK(slurp(a / f) == slurp(b / f));
    }

    for (Stage s : all_stages()) CHECK(run_stage(s, cfg, {a, false, nullptr}) == StageOutcome::UpToDate);
    CHECK(run_stage(Stage::Report, cfg, {a, true, nullptr}) == StageOutcome::Ran);

    // A training key invalidates training and everything downstream only.
    PipelineConfig changed = cfg;
    changed.experiment.model.train.lr = 0.002;
    CHECK(run_stage(Stage::Generate, changed, {a, false, nullptr}) == StageOutcome::UpToDate);
    CHECK(run_stage(Stage::Augment, changed, {a, false, nullptr}) == StageOutcome::UpToDate);
    CHECK(run_stage(Stage::Train, changed, {a, false, nullptr}) == StageOutcome::Ran);
    CHECK(run_stage(Stage::Infer, changed, {a, false, nullptr}) == StageOutcome::Ran);

    // Tampering with an output makes the stage stale.
    std::ofstream(b / "report" / "summary.md", std::ios::app) << "edited\n";
    CHECK(run_stage(Stage::Report, cfg, {b, false, nullptr}) == StageOutcome::Ran);
    CHECK(slurp(b / "report" / "summary.md") == slurp(a / "report" / "summary.md"));
}

TEST_CASE("paired synthetic test sets change one factor each") {
    DataConfig cfg = tiny().experiment.data;
    REQUIRE(cfg.paired_tests);
    const Dataset ds = generate_dataset(cfg, 5);
    REQUIRE(ds.tests.size() == 3);
    const auto &control = ds.tests[0], &alea = ds.tests[1], &epi = ds.tests[2];
    REQUIRE(alea.size() == control.size());
    REQUIRE(epi.size() == control.size());
    for (std::size_t i = 0; i < control.size(); ++i) {
        CHECK(alea.params[i].c1 == control.params[i].c1);
        CHECK(alea.params[i].lobes == control.params[i].lobes);
        CHECK(alea.image_seeds[i] == control.image_seeds[i]);
        CHECK(alea.blur[i] == cfg.aleatoric_blur);
        CHECK(epi.params[i].c2 == control.params[i].c2);
        CHECK(epi.params[i].lobes == cfg.epistemic_lobes);
        CHECK(epi.blur[i] == control.blur[i]);
    }
    cfg.paired_tests = false;
    const Dataset unpaired = generate_dataset(cfg, 5);
    CHECK(unpaired.tests[1].params[0].c1 != control.params[0].c1);
}
