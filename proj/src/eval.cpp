#include "probshape/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include <fstream>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "probshape/augment.hpp"
#include "probshape/binary_io.hpp"
#include "probshape/error.hpp"
#include "probshape/rng.hpp"

namespace probshape {

using Eigen::Vector3d;

TriMesh reconstruct_surface(const PcaSubspace &sub, const TriMesh &mean_mesh, const ScoreVector &z, double lambda) {
    const std::size_t m = sub.point_count();
    if (mean_mesh.vertices.size() < m) throw DataError("reconstruct_surface: mean mesh has fewer vertices than points");
    const ShapeSample mu{sub.mean};
    const Eigen::Matrix3Xd source = as_matrix(mu);
    const Eigen::Matrix3Xd target = as_matrix(decode(sub, z));
    const auto warp = TpsWarp::fit(source, target, lambda < 0.0 ? default_tps_lambda(source) : lambda);
    TriMesh out = mean_mesh;
    for (auto &v : out.vertices) v = warp(v);
    return out;
}

TriMesh mean_mesh(std::span<const TriMesh> meshes) {
    if (meshes.empty()) throw DataError("mean_mesh: no meshes");
    TriMesh out = meshes.front();
    for (std::size_t i = 1; i < meshes.size(); ++i) {
        if (meshes[i].vertices.size() != out.vertices.size()) throw DataError("mean_mesh: meshes differ in vertex count");
        for (std::size_t v = 0; v < out.vertices.size(); ++v) out.vertices[v] += meshes[i].vertices[v];
    }
    for (auto &v : out.vertices) v /= static_cast<double>(meshes.size());
    return out;
}

double point_triangle_distance(const Vector3d &p, const Vector3d &a, const Vector3d &b, const Vector3d &c) {
    // Closest point by Voronoi-region classification.
    const Vector3d ab = b - a, ac = c - a, ap = p - a;
    const double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0) return ap.norm();
    const Vector3d bp = p - b;
    const double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0.0 && d4 <= d3) return bp.norm();
    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
        const double v = d1 / (d1 - d3);
        return (p - (a + v * ab)).norm();
    }
    const Vector3d cp = p - c;
    const double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0.0 && d5 <= d6) return cp.norm();
    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
        const double w = d2 / (d2 - d6);
        return (p - (a + w * ac)).norm();
    }
    const double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
        const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + w * (c - b))).norm();
    }
    const double denom = 1.0 / (va + vb + vc);
    const double v = vb * denom, w = vc * denom;
    return (p - (a + ab * v + ac * w)).norm();
}

double one_sided_distance(const TriMesh &from, const TriMesh &to) {
    if (from.vertices.empty() || to.faces.empty()) throw DataError("surface distance: empty mesh");
    double acc = 0.0;
    for (const auto &p : from.vertices) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto &f : to.faces) {
            const auto &a = to.vertices[f[0]];
            const auto &b = to.vertices[f[1]];
            const auto &c = to.vertices[f[2]];
            // Cheap sphere bound before the exact test.
            const Vector3d centre = (a + b + c) / 3.0;
            const double reach = std::max({(a - centre).norm(), (b - centre).norm(), (c - centre).norm()});
            if ((p - centre).norm() - reach >= best) continue;
            best = std::min(best, point_triangle_distance(p, a, b, c));
        }
        acc += best;
    }
    return acc / static_cast<double>(from.vertices.size());
}

double surface_distance(const TriMesh &pred, const TriMesh &truth) {
    return 0.5 * (one_sided_distance(pred, truth) + one_sided_distance(truth, pred));
}

namespace {

// 1D squared distance transform of a sampled function (lower envelope of
// parabolas), in place over a strided line.
void edt_1d(std::vector<double> &f, std::vector<double> &d, std::vector<std::size_t> &v, std::vector<double> &z,
            double w2) {
    const std::size_t n = f.size();
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::size_t k = 0;
    // Skip leading infinite samples: they contribute no parabola.
    std::size_t first = 0;
    while (first < n && !std::isfinite(f[first])) ++first;
    if (first == n) {
        std::fill(d.begin(), d.end(), inf);
        f = d;
        return;
    }
    v[0] = first;
    z[0] = -inf;
    z[1] = inf;
    for (std::size_t q = first + 1; q < n; ++q) {
        if (!std::isfinite(f[q])) continue;
        const double qd = static_cast<double>(q);
        double s = 0.0;
        while (true) {
            const double vd = static_cast<double>(v[k]);
            s = ((f[q] / w2 + qd * qd) - (f[v[k]] / w2 + vd * vd)) / (2.0 * (qd - vd));
            if (s <= z[k] && k > 0) {
                --k;
                continue;
            }
            break;
        }
        if (s <= z[k]) {
            v[k] = q;
            z[k + 1] = inf;
        } else {
            ++k;
            v[k] = q;
            z[k] = s;
            z[k + 1] = inf;
        }
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < static_cast<double>(q)) ++k;
        const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
        d[q] = w2 * diff * diff + f[v[k]];
    }
    f = d;
}

} // namespace

Volume3D distance_transform(const Volume3D &mask) {
    mask.validate();
    const auto &dims = mask.dims;
    std::vector<double> sq(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        sq[i] = mask.data[i] > 0.5f ? 0.0 : std::numeric_limits<double>::infinity();
    }
    const std::array<std::size_t, 3> stride{1, dims[0], dims[0] * dims[1]};
    for (int axis = 0; axis < 3; ++axis) {
        const std::size_t n = dims[axis];
        const double w2 = mask.spacing[axis] * mask.spacing[axis];
        std::vector<double> f(n), d(n), z(n + 1);
        std::vector<std::size_t> v(n);
        const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
        for (std::size_t j = 0; j < dims[a2]; ++j) {
            for (std::size_t i = 0; i < dims[a1]; ++i) {
                const std::size_t base = i * stride[a1] + j * stride[a2];
                for (std::size_t q = 0; q < n; ++q) f[q] = sq[base + q * stride[axis]];
                edt_1d(f, d, v, z, w2);
                for (std::size_t q = 0; q < n; ++q) sq[base + q * stride[axis]] = f[q];
            }
        }
    }
    Volume3D out = mask;
    for (std::size_t i = 0; i < mask.size(); ++i) out.data[i] = static_cast<float>(std::sqrt(sq[i]));
    return out;
}

Volume3D signed_distance(const Volume3D &mask) {
    Volume3D inverted = mask;
    for (auto &v : inverted.data) v = v > 0.5f ? 0.0f : 1.0f;
    const Volume3D outside = distance_transform(mask);    // 0 inside
    const Volume3D inside_d = distance_transform(inverted); // 0 outside
    Volume3D out = mask;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = outside.data[i] - inside_d.data[i];
    return out;
}

namespace {

std::vector<double> min_max(const std::vector<double> &v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    std::vector<double> out(v.size(), 0.0);
    const double range = *hi - *lo;
    if (!(range > 0.0)) return out;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / range;
    return out;
}

} // namespace

AtypicalityScores atypicality_scores(const Eigen::MatrixXd &data, double variance_target) {
    const auto n = data.cols();
    if (n < 3) throw DataError("atypicality needs at least 3 samples");
    if (!(variance_target > 0.0 && variance_target <= 1.0)) throw ConfigError("variance target must be in (0, 1]");
    // Every sample is scored against the PCA of the other n - 1. All inner
    // products follow from the Gram matrix K of the globally centred data:
    // with a_j the centred samples, the others' mean is -a_i / (n - 1).
    const Eigen::MatrixXd centered = data.colwise() - data.rowwise().mean();
    const Eigen::MatrixXd k = centered.transpose() * centered;
    const double nd = static_cast<double>(n);
    const double inv = 1.0 / (nd - 1.0);
    const double dim = static_cast<double>(data.rows());

    AtypicalityScores s;
    s.within.resize(static_cast<std::size_t>(n));
    s.off.resize(static_cast<std::size_t>(n));
    std::vector<Eigen::Index> others;
    for (Eigen::Index i = 0; i < n; ++i) {
        others.clear();
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j != i) others.push_back(j);
        }
        const auto m = static_cast<Eigen::Index>(others.size());
        Eigen::MatrixXd g(m, m);
        Eigen::VectorXd cy(m);
        for (Eigen::Index a = 0; a < m; ++a) {
            const auto ja = others[static_cast<std::size_t>(a)];
            for (Eigen::Index b = 0; b < m; ++b) {
                const auto jb = others[static_cast<std::size_t>(b)];
                g(a, b) = k(ja, jb) + (k(ja, i) + k(jb, i)) * inv + k(i, i) * inv * inv;
            }
            cy[a] = nd * inv * (k(ja, i) + k(i, i) * inv);
        }
        const double yy = nd * nd * inv * inv * k(i, i);

        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
        if (es.info() != Eigen::Success) throw NumericalError("atypicality: eigendecomposition failed");
        const Eigen::VectorXd lam = es.eigenvalues().reverse();
        const Eigen::MatrixXd vec = es.eigenvectors().rowwise().reverse();
        const double max_lam = std::max(lam.size() ? lam[0] : 0.0, 0.0);
        const double tol = max_lam * 1e-10 * static_cast<double>(std::max<Eigen::Index>(m, data.rows()));
        const double total = g.trace();
        double within = 0.0, captured = 0.0, acc = 0.0;
        for (Eigen::Index l = 0; l < m && max_lam > 0.0 && lam[l] > tol; ++l) {
            const double z = vec.col(l).dot(cy) / std::sqrt(lam[l]);
            within += z * z / (lam[l] / static_cast<double>(m - 1));
            captured += z * z;
            acc += lam[l];
            if (acc >= variance_target * total * (1.0 - 1e-12)) break;
        }
        s.within[static_cast<std::size_t>(i)] = std::sqrt(within);
        s.off[static_cast<std::size_t>(i)] = std::max(yy - captured, 0.0) / dim;
    }
    const auto wn = min_max(s.within);
    const auto on = min_max(s.off);
    s.combined.resize(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < s.combined.size(); ++i) s.combined[i] = wn[i] + on[i];
    return s;
}

std::vector<std::size_t> rank_descending(std::span<const double> scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

namespace {

Eigen::MatrixXd stack_columns(std::span<const Volume3D> vols) {
    Eigen::MatrixXd data(static_cast<Eigen::Index>(vols.front().size()), static_cast<Eigen::Index>(vols.size()));
    for (std::size_t i = 0; i < vols.size(); ++i) {
        if (vols[i].size() != vols.front().size()) throw DataError("test selection: volumes differ in size");
        for (std::size_t v = 0; v < vols[i].size(); ++v) data(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(i)) = vols[i].data[v];
    }
    return data;
}

} // namespace

TestSplit select_test_sets(std::span<const Volume3D> images, std::span<const Volume3D> masks, std::size_t set_size,
                           std::uint64_t seed) {
    const std::size_t n = images.size();
    if (masks.size() != n) throw DataError("test selection: image and mask counts differ");
    if (set_size == 0) throw ConfigError("test selection: set size must be >= 1");
    if (n < 3 * set_size) {
        throw DataError("test selection: pool of " + std::to_string(n) + " is too small for three sets of " +
                        std::to_string(set_size));
    }
    TestSplit split;
    split.image_scores = atypicality_scores(stack_columns(images));
    std::vector<Volume3D> sdfs;
    sdfs.reserve(n);
    for (const auto &m : masks) sdfs.push_back(signed_distance(m));
    split.shape_scores = atypicality_scores(stack_columns(sdfs));

    const auto by_image = rank_descending(split.image_scores.combined);
    const auto by_shape = rank_descending(split.shape_scores.combined);
    split.aleatoric.assign(by_image.begin(), by_image.begin() + static_cast<std::ptrdiff_t>(set_size));
    split.epistemic.assign(by_shape.begin(), by_shape.begin() + static_cast<std::ptrdiff_t>(set_size));

    std::set<std::size_t> held(split.aleatoric.begin(), split.aleatoric.end());
    for (auto i : split.epistemic) {
        if (!held.insert(i).second) split.overlap.push_back(i);
    }
    std::sort(split.overlap.begin(), split.overlap.end());
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n; ++i) {
        if (!held.contains(i)) rest.push_back(i);
    }
    Rng rng(seed);
    std::shuffle(rest.begin(), rest.end(), rng);
    split.control.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(set_size));
    split.remainder.assign(rest.begin() + static_cast<std::ptrdiff_t>(set_size), rest.end());
    std::sort(split.control.begin(), split.control.end());
    std::sort(split.remainder.begin(), split.remainder.end());
    return split;
}

namespace {

double quantile(const std::vector<double> &sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

Stats describe(std::span<const double> values) {
    Stats s;
    if (values.empty()) return s;
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;
    if (sorted.size() > 1) {
        double acc = 0.0;
        for (double v : sorted) acc += (v - s.mean) * (v - s.mean);
        s.std = std::sqrt(acc / (n - 1.0));
    }
    s.min = sorted.front();
    s.max = sorted.back();
    s.q1 = quantile(sorted, 0.25);
    s.median = quantile(sorted, 0.5);
    s.q3 = quantile(sorted, 0.75);
    return s;
}

const SetSummary &EvalReport::set(const std::string &name) const {
    for (const auto &s : sets) {
        if (s.set == name) return s;
    }
    throw DataError("report for model '" + model + "' has no set '" + name + "'");
}

void summarize(EvalReport &report) {
    report.sets.clear();
    std::vector<std::string> order;
    for (const auto &r : report.samples) {
        if (!(r.distance >= 0.0)) throw DataError("report: negative or non-finite distance in set " + r.set);
        if (std::find(order.begin(), order.end(), r.set) == order.end()) order.push_back(r.set);
    }
    for (const auto &name : order) {
        std::vector<double> d, a, e;
        for (const auto &r : report.samples) {
            if (r.set != name) continue;
            d.push_back(r.distance);
            a.push_back(r.aleatoric);
            e.push_back(r.epistemic);
        }
        report.sets.push_back({name, d.size(), describe(d), describe(a), describe(e)});
    }
}

void write_report_csv(const std::filesystem::path &path, std::span<const EvalReport> reports) {
    std::ostringstream out;
    out << "model,set,index,distance,aleatoric,epistemic\n";
    for (const auto &rep : reports) {
        for (const auto &r : rep.samples) {
            out << rep.model << ',' << r.set << ',' << r.index << ',' << fmt(r.distance) << ',' << fmt(r.aleatoric)
                << ',' << fmt(r.epistemic) << '\n';
        }
    }
    io::write_text_file(path, out.str());
}

namespace {

nlohmann::ordered_json stats_json(const Stats &s) {
    nlohmann::ordered_json j;
    j["mean"] = s.mean;
    j["std"] = s.std;
    j["min"] = s.min;
    j["q1"] = s.q1;
    j["median"] = s.median;
    j["q3"] = s.q3;
    j["max"] = s.max;
    return j;
}

} // namespace

void write_report_json(const std::filesystem::path &path, std::span<const EvalReport> reports) {
    nlohmann::ordered_json root;
    root["units"] = {{"distance", "world units, symmetric mean surface-to-surface"},
                     {"aleatoric", "unwhitened PCA score variance, mean over modes"},
                     {"epistemic", "unwhitened PCA score variance, mean over modes"}};
    nlohmann::ordered_json models = nlohmann::ordered_json::array();
    for (const auto &rep : reports) {
        nlohmann::ordered_json m;
        m["model"] = rep.model;
        nlohmann::ordered_json sets = nlohmann::ordered_json::array();
        for (const auto &s : rep.sets) {
            nlohmann::ordered_json js;
            js["set"] = s.set;
            js["count"] = s.count;
            js["distance"] = stats_json(s.distance);
            js["aleatoric"] = stats_json(s.aleatoric);
            js["epistemic"] = stats_json(s.epistemic);
            nlohmann::ordered_json scatter = nlohmann::ordered_json::array();
            for (const auto &r : rep.samples) {
                if (r.set != s.set) continue;
                scatter.push_back({r.index, r.distance, r.aleatoric + r.epistemic});
            }
            js["scatter_index_distance_uncertainty"] = scatter;
            sets.push_back(js);
        }
        m["sets"] = sets;
        models.push_back(m);
    }
    root["models"] = models;
    io::write_text_file(path, root.dump(2) + "\n");
}

std::vector<EvalReport> read_report_csv(const std::filesystem::path &path) {
    std::istringstream in(io::read_text_file(path));
    std::string line;
    if (!std::getline(in, line) || line != "model,set,index,distance,aleatoric,epistemic") {
        throw DataError(path.string() + ": unexpected report header");
    }
    std::vector<EvalReport> reports;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 6) throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
        if (reports.empty() || reports.back().model != f[0]) reports.push_back({f[0], {}, {}});
        try {
            reports.back().samples.push_back(
                {f[1], std::stoul(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])});
        } catch (const std::logic_error &) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
        }
    }
    for (auto &r : reports) summarize(r);
    return reports;
}

} // namespace probshape
