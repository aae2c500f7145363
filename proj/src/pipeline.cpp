#include "probshape/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "probshape/binary_io.hpp"
#include "probshape/error.hpp"
#include "probshape/rng.hpp"

namespace probshape {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration

namespace {

struct KeySpec {
    std::string key;
    std::function<json(const PipelineConfig &)> get;
    std::function<void(PipelineConfig &, const json &)> set;
};

[[noreturn]] void bad_type(const std::string &key, const char *expected) {
    throw ConfigError("config key '" + key + "': expected " + expected);
}

double as_double(const std::string &key, const json &v) {
    if (!v.is_number()) bad_type(key, "a number");
    return v.get<double>();
}

std::uint64_t as_uint(const std::string &key, const json &v) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
    bad_type(key, "a non-negative integer");
}

int as_int(const std::string &key, const json &v) {
    if (!v.is_number_integer()) bad_type(key, "an integer");
    return v.get<int>();
}

bool as_bool(const std::string &key, const json &v) {
    if (!v.is_boolean()) bad_type(key, "true or false");
    return v.get<bool>();
}

std::string as_string(const std::string &key, const json &v) {
    if (!v.is_string()) bad_type(key, "a string");
    return v.get<std::string>();
}

// `ref` is a generic accessor usable on const and mutable configs.
template <typename F> KeySpec dbl(std::string key, F ref) {
    return {key, [ref](const PipelineConfig &c) { return json(ref(c)); },
            [ref, key](PipelineConfig &c, const json &v) { ref(c) = as_double(key, v); }};
}

template <typename F> KeySpec count(std::string key, F ref) {
    return {key, [ref](const PipelineConfig &c) { return json(ref(c)); },
            [ref, key](PipelineConfig &c, const json &v) { ref(c) = static_cast<std::size_t>(as_uint(key, v)); }};
}

template <typename F> KeySpec integer(std::string key, F ref) {
    return {key, [ref](const PipelineConfig &c) { return json(ref(c)); },
            [ref, key](PipelineConfig &c, const json &v) { ref(c) = as_int(key, v); }};
}

template <typename F> KeySpec flag(std::string key, F ref) {
    return {key, [ref](const PipelineConfig &c) { return json(ref(c)); },
            [ref, key](PipelineConfig &c, const json &v) { ref(c) = as_bool(key, v); }};
}

const std::vector<KeySpec> &registry() {
    static const std::vector<KeySpec> specs = [] {
        std::vector<KeySpec> s;
        s.push_back({"seed", [](const PipelineConfig &c) { return json(c.seed); },
                     [](PipelineConfig &c, const json &v) { c.seed = as_uint("seed", v); }});
        s.push_back({"data.dims",
                     [](const PipelineConfig &c) {
                         const auto &d = c.experiment.data.dims;
                         return json::array({d[0], d[1], d[2]});
                     },
                     [](PipelineConfig &c, const json &v) {
                         if (!v.is_array() || v.size() != 3) bad_type("data.dims", "an array of 3 integers");
                         for (std::size_t i = 0; i < 3; ++i) c.experiment.data.dims[i] = as_uint("data.dims", v[i]);
                     }});
        s.push_back(count("data.lattice.n_theta", [](auto &c) -> auto & { return c.experiment.data.lattice.n_theta; }));
        s.push_back(count("data.lattice.n_phi", [](auto &c) -> auto & { return c.experiment.data.lattice.n_phi; }));
        s.push_back(dbl("data.prior.dof", [](auto &c) -> auto & { return c.experiment.data.prior.dof; }));
        s.push_back(dbl("data.prior.shift", [](auto &c) -> auto & { return c.experiment.data.prior.shift; }));
        s.push_back(dbl("data.imaging.fg_mean", [](auto &c) -> auto & { return c.experiment.data.imaging.fg_mean; }));
        s.push_back(dbl("data.imaging.bg_mean", [](auto &c) -> auto & { return c.experiment.data.imaging.bg_mean; }));
        s.push_back(dbl("data.imaging.intensity_sigma",
                        [](auto &c) -> auto & { return c.experiment.data.imaging.intensity_sigma; }));
        s.push_back(dbl("data.imaging.noise_sigma", [](auto &c) -> auto & { return c.experiment.data.imaging.noise_sigma; }));
        s.push_back(dbl("data.imaging.blur_sigma", [](auto &c) -> auto & { return c.experiment.data.imaging.blur_sigma; }));
        s.push_back(dbl("data.aleatoric_blur", [](auto &c) -> auto & { return c.experiment.data.aleatoric_blur; }));
        s.push_back(integer("data.train_lobes", [](auto &c) -> auto & { return c.experiment.data.train_lobes; }));
        s.push_back(integer("data.epistemic_lobes", [](auto &c) -> auto & { return c.experiment.data.epistemic_lobes; }));
        s.push_back(count("data.train_count", [](auto &c) -> auto & { return c.experiment.data.train_count; }));
        s.push_back(count("data.test_size", [](auto &c) -> auto & { return c.experiment.data.test_size; }));
        s.push_back(flag("data.paired_tests", [](auto &c) -> auto & { return c.experiment.data.paired_tests; }));
        s.push_back({"data.split",
                     [](const PipelineConfig &c) {
                         return json(c.experiment.data.split == SplitMode::Synthetic ? "synthetic" : "selection");
                     },
                     [](PipelineConfig &c, const json &v) {
                         const auto m = as_string("data.split", v);
                         if (m == "synthetic") c.experiment.data.split = SplitMode::Synthetic;
                         else if (m == "selection") c.experiment.data.split = SplitMode::Selection;
                         else throw ConfigError("config key 'data.split': expected \"synthetic\" or \"selection\"");
                     }});
        s.push_back(count("data.pool_count", [](auto &c) -> auto & { return c.experiment.data.pool_count; }));
        s.push_back(dbl("augment.variance_target", [](auto &c) -> auto & { return c.experiment.augment.variance_target; }));
        s.push_back({"augment.fixed_modes",
                     [](const PipelineConfig &c) { return json(c.experiment.augment.fixed_modes.value_or(0)); },
                     [](PipelineConfig &c, const json &v) {
                         const auto n = as_uint("augment.fixed_modes", v);
                         c.experiment.augment.fixed_modes = n ? std::optional<std::size_t>(n) : std::nullopt;
                     }});
        s.push_back({"augment.kernel",
                     [](const PipelineConfig &c) {
                         return json(c.experiment.augment.covariance == KernelCovariance::Mahalanobis ? "mahalanobis"
                                                                                                      : "isotropic");
                     },
                     [](PipelineConfig &c, const json &v) {
                         const auto m = as_string("augment.kernel", v);
                         if (m == "mahalanobis") c.experiment.augment.covariance = KernelCovariance::Mahalanobis;
                         else if (m == "isotropic") c.experiment.augment.covariance = KernelCovariance::Isotropic;
                         else throw ConfigError("config key 'augment.kernel': expected \"mahalanobis\" or \"isotropic\"");
                     }});
        s.push_back(count("augment.train_count", [](auto &c) -> auto & { return c.experiment.augment.train_count; }));
        s.push_back(count("augment.val_count", [](auto &c) -> auto & { return c.experiment.augment.val_count; }));
        s.push_back(dbl("augment.train_fraction", [](auto &c) -> auto & { return c.experiment.augment.train_fraction; }));
        s.push_back(flag("augment.scale_with_fraction",
                         [](auto &c) -> auto & { return c.experiment.augment.scale_with_fraction; }));
        s.push_back({"net.conv",
                     [](const PipelineConfig &c) {
                         json a = json::array();
                         for (const auto &st : c.experiment.model.net.conv) a.push_back({st.channels, st.kernel, st.stride});
                         return a;
                     },
                     [](PipelineConfig &c, const json &v) {
                         if (!v.is_array() || v.empty()) bad_type("net.conv", "a non-empty array of [channels, kernel, stride]");
                         std::vector<ConvStage> conv;
                         for (const auto &e : v) {
                             if (!e.is_array() || e.size() != 3) bad_type("net.conv", "entries [channels, kernel, stride]");
                             conv.push_back({as_uint("net.conv", e[0]), as_uint("net.conv", e[1]), as_uint("net.conv", e[2])});
                         }
                         c.experiment.model.net.conv = conv;
                     }});
        s.push_back({"net.fc", [](const PipelineConfig &c) { return json(c.experiment.model.net.fc); },
                     [](PipelineConfig &c, const json &v) {
                         if (!v.is_array()) bad_type("net.fc", "an array of widths");
                         std::vector<std::size_t> fc;
                         for (const auto &e : v) fc.push_back(as_uint("net.fc", e));
                         c.experiment.model.net.fc = fc;
                     }});
        s.push_back(dbl("net.dropout", [](auto &c) -> auto & { return c.experiment.model.net.dropout; }));
        s.push_back(dbl("train.lr", [](auto &c) -> auto & { return c.experiment.model.train.lr; }));
        s.push_back(count("train.batch_size", [](auto &c) -> auto & { return c.experiment.model.train.batch_size; }));
        s.push_back(count("train.epochs", [](auto &c) -> auto & { return c.experiment.model.train.epochs; }));
        s.push_back(dbl("train.beta1", [](auto &c) -> auto & { return c.experiment.model.train.beta1; }));
        s.push_back(dbl("train.beta2", [](auto &c) -> auto & { return c.experiment.model.train.beta2; }));
        s.push_back(dbl("train.epsilon", [](auto &c) -> auto & { return c.experiment.model.train.epsilon; }));
        s.push_back(count("model.mc_passes", [](auto &c) -> auto & { return c.experiment.model.mc_passes; }));
        s.push_back(flag("model.baseline", [](auto &c) -> auto & { return c.experiment.model.baseline; }));
        s.push_back(flag("model.baseline_dropout", [](auto &c) -> auto & { return c.experiment.model.baseline_dropout; }));
        s.push_back(count("report.entropy_draws", [](auto &c) -> auto & { return c.entropy_draws; }));
        s.push_back(count("report.heatmap_samples", [](auto &c) -> auto & { return c.heatmap_samples; }));
        return s;
    }();
    return specs;
}

} // namespace

void PipelineConfig::validate() const {
    experiment.data.validate();
    experiment.augment.validate();
    experiment.model.validate();
    experiment.model.net.validate();
    if (entropy_draws < 10) throw ConfigError("report.entropy_draws must be >= 10");
}

PipelineConfig PipelineConfig::from_json_text(const std::string &text, const std::string &source) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error &e) {
        throw ConfigError(source + ": invalid JSON: " + e.what());
    }
    if (!root.is_object()) throw ConfigError(source + ": top level must be a JSON object");
    PipelineConfig cfg;
    const auto &specs = registry();
    for (const auto &[key, value] : root.items()) {
        const auto it = std::find_if(specs.begin(), specs.end(), [&](const KeySpec &s) { return s.key == key; });
        if (it == specs.end()) throw ConfigError(source + ": unknown key '" + key + "'");
        try {
            it->set(cfg, value);
        } catch (const ConfigError &e) {
            throw ConfigError(source + ": " + e.what());
        } catch (const json::exception &e) {
            throw ConfigError(source + ": config key '" + key + "': " + e.what());
        }
    }
    try {
        cfg.validate();
    } catch (const ConfigError &e) {
        throw ConfigError(source + ": " + e.what());
    }
    return cfg;
}

std::string PipelineConfig::to_json_text() const {
    ordered_json j = ordered_json::object();
    for (const auto &s : registry()) j[s.key] = s.get(*this);
    return j.dump(2) + "\n";
}

std::string PipelineConfig::section_text(const std::vector<std::string_view> &prefixes) const {
    ordered_json j = ordered_json::object();
    for (const auto &s : registry()) {
        const bool match = std::any_of(prefixes.begin(), prefixes.end(),
                                       [&](std::string_view p) { return std::string_view(s.key).starts_with(p); });
        if (match) j[s.key] = s.get(*this);
    }
    return j.dump();
}

std::vector<std::string> PipelineConfig::keys() {
    std::vector<std::string> out;
    for (const auto &s : registry()) out.push_back(s.key);
    return out;
}

PipelineConfig load_pipeline_config(const fs::path &path) {
    if (!fs::exists(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
    return PipelineConfig::from_json_text(io::read_text_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Hashing, lock, paths

std::uint64_t content_hash(std::string_view bytes, std::uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t directory_hash(const fs::path &dir, std::string_view exclude) {
    std::vector<fs::path> files;
    if (fs::exists(dir)) {
        for (const auto &e : fs::recursive_directory_iterator(dir)) {
            if (e.is_regular_file() && e.path().filename() != exclude) files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::uint64_t h = content_hash("");
    for (const auto &f : files) {
        h = content_hash(fs::relative(f, dir).generic_string(), h);
        h = content_hash(io::read_text_file(f), h);
    }
    return h;
}

OutputLock::OutputLock(const fs::path &out_dir) : path_(out_dir / ".probshape.lock") {
    fs::create_directories(out_dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        throw LockError("output directory '" + out_dir.string() + "' is locked by another run (remove '" +
                        path_.string() + "' if no run is active)");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

OutputLock::~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

fs::path resolve_out_dir(const std::string &explicit_dir) {
    if (!explicit_dir.empty()) return explicit_dir;
    if (const char *env = std::getenv("PROBSHAPE_OUT_DIR"); env && *env) return env;
    return "probshape_out";
}

std::string version_text() {
    return "probshape 1.0.0\n"
           "formats: PSVOL1 PSPTS1 PSPCA1 PSNET1, report schema 1";
}

std::string_view stage_name(Stage stage) {
    switch (stage) {
    case Stage::Generate: return "generate";
    case Stage::Augment: return "augment";
    case Stage::Train: return "train";
    case Stage::Infer: return "infer";
    case Stage::Evaluate: return "evaluate";
    case Stage::Report: return "report";
    }
    return "unknown";
}

const std::vector<Stage> &all_stages() {
    static const std::vector<Stage> stages{Stage::Generate, Stage::Augment, Stage::Train,
                                           Stage::Infer,    Stage::Evaluate, Stage::Report};
    return stages;
}

// ---------------------------------------------------------------------------
// Artifact helpers

namespace {

constexpr const char *kStamp = "stamp.txt";

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string hex(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string sample_name(const std::string &set, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "_%04zu", i);
    return set + buf;
}

std::vector<std::string> split_csv(const std::string &line) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    return f;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const fs::path &path) {
    if (!fs::exists(path)) throw DataError("missing input '" + path.string() + "'");
    std::istringstream in(io::read_text_file(path));
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw DataError("'" + path.string() + "' is empty");
    t.header = split_csv(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        t.rows.push_back(split_csv(line));
        if (t.rows.back().size() != t.header.size()) {
            throw DataError("'" + path.string() + "' row " + std::to_string(t.rows.size()) + ": expected " +
                            std::to_string(t.header.size()) + " fields");
        }
    }
    return t;
}

double parse_double(const std::string &s, const fs::path &path, const std::string &field) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::logic_error &) {
        throw DataError("'" + path.string() + "': field '" + field + "' is not a number: '" + s + "'");
    }
}

std::uint64_t parse_uint(const std::string &s, const fs::path &path, const std::string &field) {
    try {
        std::size_t pos = 0;
        const auto v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::logic_error &) {
        throw DataError("'" + path.string() + "': field '" + field + "' is not an integer: '" + s + "'");
    }
}

Volume3D read_frame_volume(const fs::path &path, const Dims3 &dims) {
    if (!fs::exists(path)) throw DataError("missing input '" + path.string() + "'");
    Volume3D v = read_volume(path);
    if (v.dims != dims) throw DataError("'" + path.string() + "': dimensions differ from data.dims");
    const Volume3D frame = supershape_frame(dims);
    v.origin = frame.origin;
    v.spacing = frame.spacing;
    return v;
}

// --- generate ---------------------------------------------------------------

void write_dataset(const fs::path &dir, const Dataset &ds, const Lattice &lattice) {
    std::ostringstream csv;
    csv << "set,index,lobes,c1,c2,image_seed,blur,origin\n";
    auto emit = [&](const GeneratedSet &set, bool meshes) {
        for (std::size_t i = 0; i < set.size(); ++i) {
            const auto &p = set.params[i];
            csv << set.name << ',' << i << ',' << p.lobes << ',' << fmt(p.c1) << ',' << fmt(p.c2) << ','
                << set.image_seeds[i] << ',' << fmt(set.blur[i]) << ',' << set.origin[i] << '\n';
            const auto name = sample_name(set.name, i);
            write_volume(dir / "images" / (name + ".psvol"), set.images[i]);
            write_shape(dir / "shapes" / (name + ".pts"), set.shapes[i]);
            if (meshes) write_off(dir / "meshes" / (name + ".off"), extract_mesh(p, lattice));
        }
    };
    emit(ds.train, false);
    for (const auto &t : ds.tests) emit(t, true);
    io::write_text_file(dir / "sets.csv", csv.str());

    if (ds.split) {
        const auto &s = *ds.split;
        std::ostringstream sel;
        sel << "pool_index,image_within,image_off,image_combined,shape_within,shape_off,shape_combined\n";
        for (std::size_t i = 0; i < s.image_scores.combined.size(); ++i) {
            sel << i << ',' << fmt(s.image_scores.within[i]) << ',' << fmt(s.image_scores.off[i]) << ','
                << fmt(s.image_scores.combined[i]) << ',' << fmt(s.shape_scores.within[i]) << ','
                << fmt(s.shape_scores.off[i]) << ',' << fmt(s.shape_scores.combined[i]) << '\n';
        }
        io::write_text_file(dir / "selection.csv", sel.str());
        std::ostringstream ov;
        ov << "pool_index\n";
        for (auto i : s.overlap) ov << i << '\n';
        io::write_text_file(dir / "overlap.csv", ov.str());
    }
}

Dataset load_dataset(const fs::path &dir, const DataConfig &cfg) {
    const fs::path path = dir / "sets.csv";
    const CsvTable t = read_csv(path);
    const std::vector<std::string> expected{"set", "index", "lobes", "c1", "c2", "image_seed", "blur", "origin"};
    if (t.header != expected) throw DataError("'" + path.string() + "': unexpected header");
    std::map<std::string, GeneratedSet> sets;
    std::vector<std::string> order;
    for (const auto &r : t.rows) {
        auto [it, fresh] = sets.try_emplace(r[0]);
        if (fresh) {
            it->second.name = r[0];
            order.push_back(r[0]);
        }
        auto &s = it->second;
        if (parse_uint(r[1], path, "index") != s.size()) throw DataError("'" + path.string() + "': indices out of order");
        SupershapeParams p;
        p.lobes = static_cast<int>(parse_uint(r[2], path, "lobes"));
        p.c1 = parse_double(r[3], path, "c1");
        p.c2 = parse_double(r[4], path, "c2");
        p.validate();
        const auto name = sample_name(s.name, s.size());
        s.params.push_back(p);
        s.image_seeds.push_back(parse_uint(r[5], path, "image_seed"));
        s.blur.push_back(parse_double(r[6], path, "blur"));
        s.origin.push_back(parse_uint(r[7], path, "origin"));
        s.shapes.push_back(surface_points(p, cfg.lattice));
        s.images.push_back(read_frame_volume(dir / "images" / (name + ".psvol"), cfg.dims));
    }
    Dataset ds;
    if (!sets.contains("train")) throw DataError("'" + path.string() + "': no training set");
    ds.train = std::move(sets["train"]);
    for (const char *name : {"control", "aleatoric", "epistemic"}) {
        if (!sets.contains(name)) throw DataError("'" + path.string() + "': missing test set '" + name + "'");
        ds.tests.push_back(std::move(sets[name]));
    }
    return ds;
}

// --- augment ----------------------------------------------------------------

void write_training(const fs::path &dir, const TrainingData &td) {
    write_pca(dir / "pca.bin", td.sub);
    ordered_json kde;
    kde["sigma2"] = td.kde.sigma2;
    kde["covariance"] = td.kde.covariance == KernelCovariance::Mahalanobis ? "mahalanobis" : "isotropic";
    kde["kernels"] = td.kde.kernels();
    ordered_json centers = ordered_json::array();
    for (Eigen::Index c = 0; c < td.kde.centers.cols(); ++c) {
        ordered_json col = ordered_json::array();
        for (Eigen::Index l = 0; l < td.kde.centers.rows(); ++l) col.push_back(td.kde.centers(l, c));
        centers.push_back(col);
    }
    kde["centers"] = centers;
    io::write_text_file(dir / "kde.json", kde.dump(2) + "\n");

    ordered_json st;
    st["mean"] = td.stats.mean;
    st["std"] = td.stats.std;
    io::write_text_file(dir / "intensity.json", st.dump(2) + "\n");

    std::ostringstream used;
    used << "index\n";
    for (auto i : td.used) used << i << '\n';
    io::write_text_file(dir / "used.csv", used.str());

    std::ostringstream targets;
    targets << "split,index,provenance,seed";
    for (std::size_t l = 0; l < td.sub.modes(); ++l) targets << ",z_" << l;
    targets << '\n';
    std::vector<std::string> image_paths, shape_paths;
    auto emit = [&](const std::vector<AugmentedPair> &pairs, const std::string &split) {
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const auto &p = pairs[i];
            targets << split << ',' << i << ',' << p.provenance << ',' << p.seed;
            for (Eigen::Index l = 0; l < p.scores.z.size(); ++l) targets << ',' << fmt(p.scores.z[l]);
            targets << '\n';
            const auto name = sample_name(split, i);
            write_volume(dir / "images" / (name + ".psvol"), p.image);
            write_shape(dir / "shapes" / (name + ".pts"), p.shape);
            image_paths.push_back("images/" + name + ".psvol");
            shape_paths.push_back("shapes/" + name + ".pts");
        }
    };
    emit(td.augmented_train, "train");
    emit(td.augmented_val, "val");
    io::write_text_file(dir / "targets.csv", targets.str());

    const std::vector<std::string> ti(image_paths.begin(), image_paths.begin() + static_cast<std::ptrdiff_t>(td.augmented_train.size()));
    const std::vector<std::string> ts(shape_paths.begin(), shape_paths.begin() + static_cast<std::ptrdiff_t>(td.augmented_train.size()));
    const std::vector<std::string> vi(image_paths.begin() + static_cast<std::ptrdiff_t>(td.augmented_train.size()), image_paths.end());
    const std::vector<std::string> vs(shape_paths.begin() + static_cast<std::ptrdiff_t>(td.augmented_train.size()), shape_paths.end());
    write_augmented_manifest(dir / "manifest_train.txt", td.augmented_train, ti, ts);
    write_augmented_manifest(dir / "manifest_val.txt", td.augmented_val, vi, vs);
}

TrainingData load_training(const fs::path &dir, const DataConfig &cfg) {
    TrainingData td;
    if (!fs::exists(dir / "pca.bin")) throw DataError("missing input '" + (dir / "pca.bin").string() + "'");
    td.sub = read_pca(dir / "pca.bin");
    try {
        const json kde = json::parse(io::read_text_file(dir / "kde.json"));
        td.kde.sigma2 = kde.at("sigma2").get<double>();
        td.kde.covariance = kde.at("covariance").get<std::string>() == "isotropic" ? KernelCovariance::Isotropic
                                                                                   : KernelCovariance::Mahalanobis;
        const auto &centers = kde.at("centers");
        td.kde.eigenvalues = td.sub.eigenvalues;
        td.kde.centers.resize(static_cast<Eigen::Index>(td.sub.modes()), static_cast<Eigen::Index>(centers.size()));
        for (std::size_t c = 0; c < centers.size(); ++c) {
            for (std::size_t l = 0; l < td.sub.modes(); ++l) {
                td.kde.centers(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(c)) = centers.at(c).at(l).get<double>();
            }
        }
        const json st = json::parse(io::read_text_file(dir / "intensity.json"));
        td.stats.mean = st.at("mean").get<double>();
        td.stats.std = st.at("std").get<double>();
    } catch (const json::exception &e) {
        throw DataError("'" + dir.string() + "': malformed augmentation metadata: " + e.what());
    }
    const CsvTable used = read_csv(dir / "used.csv");
    for (const auto &r : used.rows) td.used.push_back(parse_uint(r[0], dir / "used.csv", "index"));

    const fs::path tpath = dir / "targets.csv";
    const CsvTable t = read_csv(tpath);
    if (t.header.size() != 4 + td.sub.modes()) throw DataError("'" + tpath.string() + "': mode count differs from pca.bin");
    for (const auto &r : t.rows) {
        AugmentedPair p;
        const auto name = sample_name(r[0], parse_uint(r[1], tpath, "index"));
        p.provenance = parse_uint(r[2], tpath, "provenance");
        p.seed = parse_uint(r[3], tpath, "seed");
        p.scores.z.resize(static_cast<Eigen::Index>(td.sub.modes()));
        for (std::size_t l = 0; l < td.sub.modes(); ++l) {
            p.scores.z[static_cast<Eigen::Index>(l)] = parse_double(r[4 + l], tpath, t.header[4 + l]);
        }
        p.image = read_frame_volume(dir / "images" / (name + ".psvol"), cfg.dims);
        p.shape = read_shape(dir / "shapes" / (name + ".pts"));
        if (r[0] == "train") td.augmented_train.push_back(std::move(p));
        else if (r[0] == "val") td.augmented_val.push_back(std::move(p));
        else throw DataError("'" + tpath.string() + "': unknown split '" + r[0] + "'");
    }
    return td;
}

// --- infer ------------------------------------------------------------------

void write_predictions(const fs::path &path, std::span<const SetPredictions> preds, std::size_t modes) {
    std::ostringstream out;
    out << "set,index";
    for (const char *k : {"z", "aleatoric", "epistemic"}) {
        for (std::size_t l = 0; l < modes; ++l) out << ',' << k << '_' << l;
    }
    out << '\n';
    for (const auto &p : preds) {
        for (std::size_t i = 0; i < p.z_mean.size(); ++i) {
            out << p.set << ',' << i;
            for (const auto *v : {&p.z_mean[i], &p.aleatoric[i], &p.epistemic[i]}) {
                for (Eigen::Index l = 0; l < v->size(); ++l) out << ',' << fmt((*v)[l]);
            }
            out << '\n';
        }
    }
    io::write_text_file(path, out.str());
}

std::vector<SetPredictions> read_predictions(const fs::path &path, std::size_t modes) {
    const CsvTable t = read_csv(path);
    if (t.header.size() != 2 + 3 * modes) throw DataError("'" + path.string() + "': mode count differs from pca.bin");
    std::vector<SetPredictions> out;
    for (const auto &r : t.rows) {
        if (out.empty() || out.back().set != r[0]) out.push_back({r[0], {}, {}, {}});
        auto &p = out.back();
        if (parse_uint(r[1], path, "index") != p.z_mean.size()) throw DataError("'" + path.string() + "': indices out of order");
        auto read_vec = [&](std::size_t offset) {
            Eigen::VectorXd v(static_cast<Eigen::Index>(modes));
            for (std::size_t l = 0; l < modes; ++l) {
                v[static_cast<Eigen::Index>(l)] = parse_double(r[offset + l], path, t.header[offset + l]);
            }
            return v;
        };
        p.z_mean.push_back(read_vec(2));
        p.aleatoric.push_back(read_vec(2 + modes));
        p.epistemic.push_back(read_vec(2 + 2 * modes));
    }
    return out;
}

void write_heatmaps(const fs::path &dir, const PipelineConfig &cfg, const PcaSubspace &sub, const TriMesh &mean,
                    std::span<const SetPredictions> preds, std::uint64_t seed) {
    for (const auto &p : preds) {
        const std::size_t n = std::min(cfg.heatmap_samples, p.z_mean.size());
        for (std::size_t i = 0; i < n; ++i) {
            const auto name = sample_name(p.set, i);
            const TriMesh mesh = reconstruct_surface(sub, mean, {p.z_mean[i], false});
            write_off(dir / (name + ".off"), mesh);
            const std::uint64_t s = derive_seed(derive_seed(seed, p.set), i);
            const std::pair<UncertaintyKind, const Eigen::VectorXd *> kinds[] = {
                {UncertaintyKind::Aleatoric, &p.aleatoric[i]}, {UncertaintyKind::Epistemic, &p.epistemic[i]}};
            for (const auto &[kind, var] : kinds) {
                const auto g = point_distributions(sub, p.z_mean[i], *var, cfg.entropy_draws,
                                                   derive_seed(s, kind == UncertaintyKind::Aleatoric ? "aleatoric" : "epistemic"));
                const auto field = entropy_field(g, kind);
                const auto values = interpolate_to_mesh(field.entropy, g.means, mesh);
                const char *suffix = kind == UncertaintyKind::Aleatoric ? "_aleatoric.csv" : "_epistemic.csv";
                write_vertex_scalars(dir / (name + suffix), values);
            }
        }
    }
}

// --- report -----------------------------------------------------------------

std::string pm(const Stats &s) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g ± %.4g", s.mean, s.std);
    return buf;
}

void write_summary(const fs::path &dir, std::span<const EvalReport> reports) {
    const EvalReport *unc = nullptr;
    const EvalReport *base = nullptr;
    for (const auto &r : reports) {
        if (r.model == "uncertain") unc = &r;
        if (r.model == "baseline") base = &r;
    }
    if (!unc) throw DataError("report: no 'uncertain' model in evaluation results");

    std::ostringstream md;
    md << "# Supershapes evaluation\n\n"
       << "Distances are symmetric mean surface-to-surface distances in world units (unit-ball shapes). "
       << "Uncertainties are unwhitened PCA score variances averaged over modes.\n\n"
       << "| Test set | Baseline distance | Uncertain distance | Aleatoric | Epistemic |\n"
       << "|---|---|---|---|---|\n";
    for (const auto &s : unc->sets) {
        md << "| " << s.set << " | " << (base ? pm(base->set(s.set).distance) : std::string("n/a")) << " | "
           << pm(s.distance) << " | " << pm(s.aleatoric) << " | " << pm(s.epistemic) << " |\n";
    }
    auto has = [&](const char *name) {
        return std::any_of(unc->sets.begin(), unc->sets.end(), [&](const SetSummary &s) { return s.set == name; });
    };
    if (has("control") && has("aleatoric") && has("epistemic")) {
        const auto &c = unc->set("control");
        md << "\n## Orderings\n\n"
           << "- aleatoric set vs control, mean aleatoric: " << (unc->set("aleatoric").aleatoric.mean > c.aleatoric.mean ? "higher" : "not higher") << '\n'
           << "- epistemic set vs control, mean epistemic: " << (unc->set("epistemic").epistemic.mean > c.epistemic.mean ? "higher" : "not higher") << '\n';
        if (base) {
            const double ratio = unc->set("aleatoric").distance.mean / base->set("aleatoric").distance.mean;
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.4f", ratio);
            md << "- uncertain / baseline distance on the aleatoric set: " << buf << '\n';
        }
    }
    io::write_text_file(dir / "summary.md", md.str());

    std::ostringstream box;
    box << "model,set,metric,min,q1,median,q3,max,mean,std\n";
    for (const auto &r : reports) {
        for (const auto &s : r.sets) {
            const std::pair<const char *, const Stats *> metrics[] = {
                {"distance", &s.distance}, {"aleatoric", &s.aleatoric}, {"epistemic", &s.epistemic}};
            for (const auto &[name, st] : metrics) {
                box << r.model << ',' << s.set << ',' << name << ',' << fmt(st->min) << ',' << fmt(st->q1) << ','
                    << fmt(st->median) << ',' << fmt(st->q3) << ',' << fmt(st->max) << ',' << fmt(st->mean) << ','
                    << fmt(st->std) << '\n';
            }
        }
    }
    io::write_text_file(dir / "boxplot.csv", box.str());

    std::ostringstream scatter;
    scatter << "model,set,index,distance,uncertainty\n";
    for (const auto &r : reports) {
        for (const auto &s : r.samples) {
            scatter << r.model << ',' << s.set << ',' << s.index << ',' << fmt(s.distance) << ','
                    << fmt(s.aleatoric + s.epistemic) << '\n';
        }
    }
    io::write_text_file(dir / "scatter.csv", scatter.str());
}

// --- stage plumbing ---------------------------------------------------------

struct StageInfo {
    std::vector<std::string_view> config_prefixes;
    std::vector<Stage> upstream;
};

StageInfo stage_info(Stage stage) {
    switch (stage) {
    case Stage::Generate: return {{"seed", "data."}, {}};
    case Stage::Augment: return {{"augment."}, {Stage::Generate}};
    case Stage::Train: return {{"net.", "train.", "model.baseline"}, {Stage::Augment}};
    case Stage::Infer: return {{"model.mc_passes", "report."}, {Stage::Train}};
    case Stage::Evaluate: return {{}, {Stage::Infer}};
    case Stage::Report: return {{}, {Stage::Evaluate}};
    }
    return {};
}

fs::path stage_dir(const RunOptions &opts, Stage s) { return opts.out_dir / std::string(stage_name(s)); }

std::string stage_key(Stage stage, const PipelineConfig &cfg, const RunOptions &opts) {
    const auto info = stage_info(stage);
    std::uint64_t h = content_hash(stage_name(stage));
    h = content_hash(cfg.section_text(info.config_prefixes), h);
    for (Stage up : info.upstream) {
        const fs::path stamp = stage_dir(opts, up) / kStamp;
        if (!fs::exists(stamp)) {
            throw DataError("stage '" + std::string(stage_name(stage)) + "' needs the outputs of '" +
                            std::string(stage_name(up)) + "' but '" + stamp.string() +
                            "' is missing; run `probshape " + std::string(stage_name(up)) + "` first");
        }
        h = content_hash(io::read_text_file(stamp), h);
    }
    return hex(h);
}

void log_line(const RunOptions &opts, Stage stage, const std::string &msg) {
    if (opts.log) *opts.log << '[' << stage_name(stage) << "] " << msg << '\n';
}

void execute(Stage stage, const PipelineConfig &cfg, const RunOptions &opts) {
    const auto &ex = cfg.experiment;
    const fs::path dir = stage_dir(opts, stage);
    const fs::path gen_dir = stage_dir(opts, Stage::Generate);
    const fs::path aug_dir = stage_dir(opts, Stage::Augment);
    const fs::path train_dir = stage_dir(opts, Stage::Train);
    const fs::path infer_dir = stage_dir(opts, Stage::Infer);
    const fs::path eval_dir = stage_dir(opts, Stage::Evaluate);

    switch (stage) {
    case Stage::Generate: {
        const Dataset ds = generate_dataset(ex.data, cfg.seed);
        write_dataset(dir, ds, ex.data.lattice);
        log_line(opts, stage, std::to_string(ds.train.size()) + " training shapes, 3 test sets of " +
                                  std::to_string(ex.data.test_size));
        break;
    }
    case Stage::Augment: {
        const Dataset ds = load_dataset(gen_dir, ex.data);
        const TrainingData td = prepare_training(ds.train, ex.augment, cfg.seed);
        write_training(dir, td);
        log_line(opts, stage, std::to_string(td.sub.modes()) + " PCA modes, " +
                                  std::to_string(td.augmented_train.size()) + " + " +
                                  std::to_string(td.augmented_val.size()) + " augmented pairs");
        break;
    }
    case Stage::Train: {
        const Dataset ds = load_dataset(gen_dir, ex.data);
        const TrainingData td = load_training(aug_dir, ex.data);
        const NetConfig net = network_for(ex.model, ex.data, td.sub);
        const TrainedModels models = train_models(ds.train, td, net, ex.model, cfg.seed);
        write_checkpoint(dir / "uncertain.psnet", net, models.uncertain.params);
        write_history_csv(dir / "history_uncertain.csv", models.uncertain.history);
        ordered_json summary;
        summary["uncertain_best_epoch"] = models.uncertain.best_epoch;
        if (models.baseline) {
            write_checkpoint(dir / "baseline.psnet", net, models.baseline->params);
            write_history_csv(dir / "history_baseline.csv", models.baseline->history);
            summary["baseline_best_epoch"] = models.baseline->best_epoch;
        }
        io::write_text_file(dir / "summary.json", summary.dump(2) + "\n");
        log_line(opts, stage, "best epoch " + std::to_string(models.uncertain.best_epoch) + " of " +
                                  std::to_string(ex.model.train.epochs));
        break;
    }
    case Stage::Infer: {
        const Dataset ds = load_dataset(gen_dir, ex.data);
        const TrainingData td = load_training(aug_dir, ex.data);
        const auto [net_cfg, params] = read_checkpoint(train_dir / "uncertain.psnet");
        const Network net(net_cfg);
        const std::uint64_t iseed = derive_seed(cfg.seed, "infer");
        std::vector<SetPredictions> up;
        for (const auto &set : ds.tests) {
            up.push_back(predict_uncertain(net, params, td.sub, td.stats, set, ex.model.mc_passes, iseed));
        }
        write_predictions(dir / "predictions_uncertain.csv", up, td.sub.modes());
        if (ex.model.baseline) {
            const auto [bcfg, bparams] = read_checkpoint(train_dir / "baseline.psnet");
            const Network bnet(bcfg);
            std::vector<SetPredictions> bp;
            for (const auto &set : ds.tests) bp.push_back(predict_baseline(bnet, bparams, td.sub, td.stats, set));
            write_predictions(dir / "predictions_baseline.csv", bp, td.sub.modes());
        }
        const TriMesh mean = training_mean_mesh(ds.train, ex.data.lattice);
        write_off(dir / "mean_mesh.off", mean);
        write_heatmaps(dir / "heatmaps", cfg, td.sub, mean, up, derive_seed(cfg.seed, "heatmaps"));
        log_line(opts, stage, std::to_string(ex.model.mc_passes) + " dropout passes per test image");
        break;
    }
    case Stage::Evaluate: {
        const Dataset ds = load_dataset(gen_dir, ex.data);
        const PcaSubspace sub = read_pca(aug_dir / "pca.bin");
        const TriMesh mean = training_mean_mesh(ds.train, ex.data.lattice);
        std::vector<EvalReport> reports;
        const auto up = read_predictions(infer_dir / "predictions_uncertain.csv", sub.modes());
        reports.push_back(evaluate_predictions("uncertain", up, ds.tests, sub, mean, ex.data.lattice));
        if (ex.model.baseline) {
            const auto bp = read_predictions(infer_dir / "predictions_baseline.csv", sub.modes());
            reports.push_back(evaluate_predictions("baseline", bp, ds.tests, sub, mean, ex.data.lattice));
        }
        write_report_csv(dir / "report.csv", reports);
        write_report_json(dir / "report.json", reports);
        log_line(opts, stage, "wrote report.csv and report.json");
        break;
    }
    case Stage::Report: {
        const auto reports = read_report_csv(eval_dir / "report.csv");
        write_summary(dir, reports);
        log_line(opts, stage, "wrote summary.md, boxplot.csv and scatter.csv");
        break;
    }
    }
}

} // namespace

StageOutcome run_stage(Stage stage, const PipelineConfig &cfg, const RunOptions &opts) {
    cfg.validate();
    const fs::path dir = stage_dir(opts, stage);
    const std::string key = stage_key(stage, cfg, opts);
    const fs::path stamp = dir / kStamp;
    if (!opts.force && fs::exists(stamp)) {
        std::istringstream in(io::read_text_file(stamp));
        std::string old_key, old_out;
        in >> old_key >> old_out;
        if (old_key == key && old_out == hex(directory_hash(dir, kStamp))) {
            log_line(opts, stage, "up to date");
            return StageOutcome::UpToDate;
        }
    }
    if (fs::exists(dir)) fs::remove_all(dir);
    fs::create_directories(dir);
    io::write_text_file(opts.out_dir / "config.json", cfg.to_json_text());
    execute(stage, cfg, opts);
    io::write_text_file(stamp, key + "\n" + hex(directory_hash(dir, kStamp)) + "\n");
    return StageOutcome::Ran;
}

void run_all(const PipelineConfig &cfg, const RunOptions &opts) {
    for (Stage s : all_stages()) run_stage(s, cfg, opts);
}

} // namespace probshape
