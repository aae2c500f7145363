#include "probshape/experiment.hpp"

#include <algorithm>
#include <cmath>

#include "probshape/error.hpp"
#include "probshape/rng.hpp"

namespace probshape {

void DataConfig::validate() const {
    lattice.validate();
    imaging.validate();
    if (std::min({dims[0], dims[1], dims[2]}) < 16) throw ConfigError("data.dims: every dimension must be >= 16");
    if (!(prior.dof > 0.0) || !(prior.shift > 0.0)) throw ConfigError("data.prior: dof and shift must be > 0");
    if (!(aleatoric_blur >= 0.0)) throw ConfigError("data.aleatoric_blur must be >= 0");
    if (train_lobes < 1 || epistemic_lobes < 1) throw ConfigError("data lobe counts must be >= 1");
    if (test_size == 0) throw ConfigError("data.test_size must be >= 1");
    if (split == SplitMode::Synthetic && train_count < 2) throw ConfigError("data.train_count must be >= 2");
    if (split == SplitMode::Selection && pool_count < 3 * test_size + 2) {
        throw ConfigError("data.pool_count must be at least 3 * data.test_size + 2");
    }
}

void AugmentConfig::validate() const {
    if (!(variance_target > 0.0 && variance_target <= 1.0)) throw ConfigError("augment.variance_target must be in (0, 1]");
    if (fixed_modes && *fixed_modes == 0) throw ConfigError("augment.fixed_modes must be >= 1");
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("augment.train_fraction must be in (0, 1]");
    if (val_count == 0) throw ConfigError("augment.val_count must be >= 1");
}

void ModelConfig::validate() const {
    train.validate();
    if (mc_passes < 2) throw ConfigError("model.mc_passes must be >= 2");
    if (!(net.dropout > 0.0 && net.dropout < 1.0)) throw ConfigError("net.dropout must be in (0, 1) for MC dropout");
}

GeneratedSet regenerate_set(std::string name, std::vector<SupershapeParams> params,
                            std::vector<std::uint64_t> image_seeds, std::vector<double> blur,
                            std::vector<std::size_t> origin, const DataConfig &cfg) {
    const std::size_t n = params.size();
    if (image_seeds.size() != n || blur.size() != n || origin.size() != n) {
        throw DataError("set '" + name + "': parameter, seed, blur and origin lists differ in length");
    }
    GeneratedSet set;
    set.name = std::move(name);
    set.params = std::move(params);
    set.image_seeds = std::move(image_seeds);
    set.blur = std::move(blur);
    set.origin = std::move(origin);
    set.shapes.reserve(n);
    set.images.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        ImagingConfig imaging = cfg.imaging;
        imaging.blur_sigma = set.blur[i];
        set.shapes.push_back(surface_points(set.params[i], cfg.lattice));
        set.images.push_back(rasterize(set.params[i], cfg.dims, imaging, set.image_seeds[i]));
    }
    return set;
}

namespace {

GeneratedSet make_set(const std::string &name, int lobes, std::size_t count, double blur, const DataConfig &cfg,
                      std::uint64_t seed) {
    const std::uint64_t set_seed = derive_seed(seed, name);
    auto params = sample_params(lobes, derive_seed(set_seed, "params"), count, cfg.prior);
    std::vector<std::uint64_t> seeds(count);
    std::vector<std::size_t> origin(count);
    for (std::size_t i = 0; i < count; ++i) {
        seeds[i] = derive_seed(derive_seed(set_seed, "image"), i);
        origin[i] = i;
    }
    return regenerate_set(name, std::move(params), std::move(seeds), std::vector<double>(count, blur),
                          std::move(origin), cfg);
}

GeneratedSet subset(const GeneratedSet &pool, const std::string &name, const std::vector<std::size_t> &idx) {
    GeneratedSet out;
    out.name = name;
    for (auto i : idx) {
        out.params.push_back(pool.params[i]);
        out.image_seeds.push_back(pool.image_seeds[i]);
        out.blur.push_back(pool.blur[i]);
        out.origin.push_back(pool.origin[i]);
        out.shapes.push_back(pool.shapes[i]);
        out.images.push_back(pool.images[i]);
    }
    return out;
}

} // namespace

Dataset generate_dataset(const DataConfig &cfg, std::uint64_t seed) {
    cfg.validate();
    const std::uint64_t gen = derive_seed(seed, "generate");
    Dataset ds;
    const double blur = cfg.imaging.blur_sigma;
    if (cfg.split == SplitMode::Synthetic) {
        ds.train = make_set("train", cfg.train_lobes, cfg.train_count, blur, cfg, gen);
        ds.tests.push_back(make_set("control", cfg.train_lobes, cfg.test_size, blur, cfg, gen));
        if (!cfg.paired_tests) {
            ds.tests.push_back(make_set("aleatoric", cfg.train_lobes, cfg.test_size, cfg.aleatoric_blur, cfg, gen));
            ds.tests.push_back(make_set("epistemic", cfg.epistemic_lobes, cfg.test_size, blur, cfg, gen));
            return ds;
        }
        // Paired sets: the control exponents and image seeds with one factor changed.
        const GeneratedSet control = ds.tests.front(); // copy: push_back below reallocates
        const std::size_t n = control.size();
        ds.tests.push_back(regenerate_set("aleatoric", control.params, control.image_seeds,
                                          std::vector<double>(n, cfg.aleatoric_blur), control.origin, cfg));
        auto lobed = control.params;
        for (auto &p : lobed) p.lobes = cfg.epistemic_lobes;
        ds.tests.push_back(regenerate_set("epistemic", std::move(lobed), control.image_seeds,
                                          std::vector<double>(n, blur), control.origin, cfg));
        return ds;
    }
    const GeneratedSet pool = make_set("pool", cfg.train_lobes, cfg.pool_count, blur, cfg, gen);
    std::vector<Volume3D> masks;
    masks.reserve(pool.size());
    for (const auto &p : pool.params) masks.push_back(rasterize_mask(p, cfg.dims));
    TestSplit split = select_test_sets(pool.images, masks, cfg.test_size, derive_seed(gen, "split"));
    ds.train = subset(pool, "train", split.remainder);
    ds.tests.push_back(subset(pool, "control", split.control));
    ds.tests.push_back(subset(pool, "aleatoric", split.aleatoric));
    ds.tests.push_back(subset(pool, "epistemic", split.epistemic));
    ds.split = std::move(split);
    return ds;
}

std::size_t used_count(std::size_t total, double fraction) {
    const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(total) - 1e-9));
    return std::clamp<std::size_t>(n, std::min<std::size_t>(2, total), total);
}

TrainingData prepare_training(const GeneratedSet &train, const AugmentConfig &cfg, std::uint64_t seed) {
    cfg.validate();
    if (train.size() < 2) throw DataError("training set needs at least 2 shapes");
    const std::uint64_t aug = derive_seed(seed, "augment");
    TrainingData td;
    PcaOptions opts;
    opts.variance_target = cfg.variance_target;
    opts.fixed_modes = cfg.fixed_modes;
    td.sub = fit_pca(train.shapes, opts);

    // Parameters are i.i.d., so the leading originals are a random subset.
    const std::size_t n_used = used_count(train.size(), cfg.train_fraction);
    std::vector<ScoreVector> scores;
    std::vector<OriginalSample> originals;
    for (std::size_t i = 0; i < n_used; ++i) {
        td.used.push_back(i);
        scores.push_back(encode(td.sub, train.shapes[i]));
        originals.push_back({&train.shapes[i], &train.images[i]});
    }
    td.kde = make_kde(td.sub, scores, cfg.covariance);

    const double scale = cfg.scale_with_fraction ? cfg.train_fraction : 1.0;
    const auto n_train = static_cast<std::size_t>(std::llround(scale * static_cast<double>(cfg.train_count)));
    const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(scale * static_cast<double>(cfg.val_count))));
    auto pairs = build_augmented_set(td.sub, td.kde, originals, n_train + n_val, aug);
    td.augmented_train.assign(std::make_move_iterator(pairs.begin()),
                              std::make_move_iterator(pairs.begin() + static_cast<std::ptrdiff_t>(n_train)));
    td.augmented_val.assign(std::make_move_iterator(pairs.begin() + static_cast<std::ptrdiff_t>(n_train)),
                            std::make_move_iterator(pairs.end()));

    std::vector<const Volume3D *> imgs;
    for (auto i : td.used) imgs.push_back(&train.images[i]);
    for (const auto &p : td.augmented_train) imgs.push_back(&p.image);
    td.stats = compute_intensity_stats(std::span<const Volume3D *const>(imgs));
    return td;
}

NetConfig network_for(const ModelConfig &cfg, const DataConfig &data, const PcaSubspace &sub) {
    NetConfig net = cfg.net;
    net.input_dims = data.dims;
    net.output_dim = sub.modes();
    net.validate();
    return net;
}

TrainedModels train_models(const GeneratedSet &train, const TrainingData &data, const NetConfig &net_cfg,
                           const ModelConfig &cfg, std::uint64_t seed) {
    cfg.validate();
    const Network net(net_cfg);
    const std::uint64_t tseed = derive_seed(seed, "train");

    std::vector<Volume3D> train_imgs, val_imgs;
    std::vector<TrainingSample> train_set, val_set;
    for (auto i : data.used) train_imgs.push_back(normalize(train.images[i], data.stats));
    for (const auto &p : data.augmented_train) train_imgs.push_back(normalize(p.image, data.stats));
    for (const auto &p : data.augmented_val) val_imgs.push_back(normalize(p.image, data.stats));
    std::size_t k = 0;
    for (auto i : data.used) {
        train_set.push_back({&train_imgs[k++], whiten(data.sub, encode(data.sub, train.shapes[i])).z});
    }
    for (const auto &p : data.augmented_train) train_set.push_back({&train_imgs[k++], whiten(data.sub, p.scores).z});
    for (std::size_t j = 0; j < data.augmented_val.size(); ++j) {
        val_set.push_back({&val_imgs[j], whiten(data.sub, data.augmented_val[j].scores).z});
    }

    TrainedModels out;
    out.config = net_cfg;
    TrainConfig uc = cfg.train;
    uc.schedule = LossSchedule::L2ThenBayesian;
    uc.dropout = true;
    uc.seed = derive_seed(tseed, "uncertain");
    out.uncertain = probshape::train(net, net.init(derive_seed(uc.seed, "init")), train_set, val_set, uc);
    if (cfg.baseline) {
        TrainConfig bc = cfg.train;
        bc.schedule = LossSchedule::L2Only;
        bc.dropout = cfg.baseline_dropout;
        bc.seed = derive_seed(tseed, "baseline");
        out.baseline = probshape::train(net, net.init(derive_seed(bc.seed, "init")), train_set, val_set, bc);
    }
    return out;
}

SetPredictions predict_uncertain(const Network &net, const NetParams &params, const PcaSubspace &sub,
                                 const IntensityStats &stats, const GeneratedSet &set, std::size_t passes,
                                 std::uint64_t seed) {
    SetPredictions out;
    out.set = set.name;
    const std::uint64_t sseed = derive_seed(seed, set.name);
    for (std::size_t i = 0; i < set.size(); ++i) {
        const auto mc = mc_infer(net, params, sub, normalize(set.images[i], stats), passes, derive_seed(sseed, i));
        out.z_mean.push_back(mc.z_mean);
        out.aleatoric.push_back(mc.aleatoric_var);
        out.epistemic.push_back(mc.epistemic_var);
    }
    return out;
}

SetPredictions predict_baseline(const Network &net, const NetParams &params, const PcaSubspace &sub,
                                const IntensityStats &stats, const GeneratedSet &set) {
    SetPredictions out;
    out.set = set.name;
    for (std::size_t i = 0; i < set.size(); ++i) {
        const auto pred = net.forward(params, normalize(set.images[i], stats), false, 0);
        out.z_mean.push_back(unwhiten(sub, {pred.z_bar, true}).z);
        out.aleatoric.push_back(Eigen::VectorXd::Zero(pred.z_bar.size()));
        out.epistemic.push_back(Eigen::VectorXd::Zero(pred.z_bar.size()));
    }
    return out;
}

TriMesh training_mean_mesh(const GeneratedSet &train, const Lattice &lattice) {
    std::vector<TriMesh> meshes;
    meshes.reserve(train.size());
    for (const auto &p : train.params) meshes.push_back(extract_mesh(p, lattice));
    return mean_mesh(meshes);
}

EvalReport evaluate_predictions(const std::string &model, std::span<const SetPredictions> preds,
                                std::span<const GeneratedSet> sets, const PcaSubspace &sub,
                                const TriMesh &mean_mesh_, const Lattice &lattice) {
    if (preds.size() != sets.size()) throw DataError("evaluation: prediction and test set counts differ");
    EvalReport report;
    report.model = model;
    for (std::size_t s = 0; s < sets.size(); ++s) {
        const auto &set = sets[s];
        const auto &p = preds[s];
        if (p.set != set.name || p.z_mean.size() != set.size()) {
            throw DataError("evaluation: predictions for '" + p.set + "' do not match test set '" + set.name + "'");
        }
        for (std::size_t i = 0; i < set.size(); ++i) {
            const TriMesh pred = reconstruct_surface(sub, mean_mesh_, {p.z_mean[i], false});
            const TriMesh truth = extract_mesh(set.params[i], lattice);
            report.samples.push_back({set.name, i, surface_distance(pred, truth), p.aleatoric[i].mean(),
                                      p.epistemic[i].mean()});
        }
    }
    summarize(report);
    return report;
}

ExperimentResult run_experiment(const ExperimentConfig &cfg, std::uint64_t seed, const Dataset *dataset) {
    std::optional<Dataset> owned;
    if (!dataset) {
        owned = generate_dataset(cfg.data, seed);
        dataset = &*owned;
    }
    ExperimentResult res;
    res.training = prepare_training(dataset->train, cfg.augment, seed);
    const NetConfig net_cfg = network_for(cfg.model, cfg.data, res.training.sub);
    res.models = train_models(dataset->train, res.training, net_cfg, cfg.model, seed);

    const Network net(net_cfg);
    const TriMesh mean = training_mean_mesh(dataset->train, cfg.data.lattice);
    const std::uint64_t iseed = derive_seed(seed, "infer");
    std::vector<SetPredictions> up;
    for (const auto &set : dataset->tests) {
        up.push_back(predict_uncertain(net, res.models.uncertain.params, res.training.sub, res.training.stats, set,
                                       cfg.model.mc_passes, iseed));
    }
    res.uncertain_predictions = up;
    res.uncertain = evaluate_predictions("uncertain", up, dataset->tests, res.training.sub, mean, cfg.data.lattice);
    if (res.models.baseline) {
        std::vector<SetPredictions> bp;
        for (const auto &set : dataset->tests) {
            bp.push_back(predict_baseline(net, res.models.baseline->params, res.training.sub, res.training.stats, set));
        }
        res.baseline = evaluate_predictions("baseline", bp, dataset->tests, res.training.sub, mean, cfg.data.lattice);
    }
    return res;
}

} // namespace probshape
