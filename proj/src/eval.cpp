#include "dive/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "dive/diffusion.hpp"
#include "dive/image_io.hpp"
#include "dive/rng.hpp"
#include "json.hpp"

namespace dive {

namespace {

using EMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

EMatrix to_eigen(const Tensor& t) {
    EMatrix m(t.size(0), t.size(1));
    for (int64_t i = 0; i < t.size(0); ++i)
        for (int64_t j = 0; j < t.size(1); ++j) m(i, j) = t.at(i, j);
    return m;
}

// Symmetric PSD square root; eigenvalues below -tol are a hard failure,
// anything in [-tol, 0) is rounding and clamps to zero.
EMatrix psd_sqrt(const EMatrix& s, const std::string& what) {
    Eigen::SelfAdjointEigenSolver<EMatrix> es(s);
    if (es.info() != Eigen::Success)
        throw NumericError("eigendecomposition failed for " + what);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> lam = es.eigenvalues();
    for (Eigen::Index i = 0; i < lam.size(); ++i) {
        if (lam[i] < -1e-8)
            throw NumericError(what + " is not positive semidefinite (eigenvalue " +
                               std::to_string(lam[i]) + ")");
        lam[i] = std::sqrt(std::max<Scalar>(lam[i], 0.0));
    }
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

void check_summary(const GaussianSummary& g, const std::string& what) {
    if (g.mean.ndim() != 1 || g.cov.ndim() != 2)
        throw DataError(what + " has malformed mean/covariance shapes");
    const int64_t d = g.mean.size(0);
    if (g.cov.size(0) != d || g.cov.size(1) != d)
        throw DataError(what + " covariance shape does not match its mean");
    if (!g.mean.all_finite() || !g.cov.all_finite())
        throw NumericError(what + " contains non-finite moments");
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = i + 1; j < d; ++j)
            if (std::abs(g.cov.at(i, j) - g.cov.at(j, i)) > 1e-8)
                throw DataError(what + " covariance is not symmetric");
}

DistanceStats stats_of(std::vector<Scalar> dists, Scalar hist_max, int64_t bins) {
    DistanceStats s;
    s.pairs = int64_t(dists.size());
    s.hist_max = hist_max;
    s.histogram.assign(size_t(bins), 0);
    for (Scalar d : dists) {
        s.mean += d;
        int64_t bin = int64_t(std::floor(d / hist_max * Scalar(bins)));
        s.histogram[size_t(std::clamp<int64_t>(bin, 0, bins - 1))] += 1;
    }
    s.mean /= Scalar(s.pairs);
    std::sort(dists.begin(), dists.end());
    const size_t mid = dists.size() / 2;
    s.median = dists.size() % 2 ? dists[mid] : 0.5 * (dists[mid - 1] + dists[mid]);
    return s;
}

}  // namespace

void FeatureSet::validate() const {
    if (matrix.ndim() != 2) throw DataError("feature matrix must be rank 2");
    const int64_t n = rows();
    if (int64_t(identities.size()) != n)
        throw DataError("feature set has " + std::to_string(n) + " rows but " +
                        std::to_string(identities.size()) + " identity labels");
    if (!modalities.empty() && int64_t(modalities.size()) != n)
        throw DataError("modality labels do not cover every feature row");
    if (!cameras.empty() && int64_t(cameras.size()) != n)
        throw DataError("camera labels do not cover every feature row");
    if (!matrix.all_finite()) throw DataError("feature matrix contains non-finite values");
    if (normalized) {
        for (int64_t i = 0; i < n; ++i) {
            Scalar nrm = 0;
            for (int64_t j = 0; j < dim(); ++j) nrm += matrix.at(i, j) * matrix.at(i, j);
            if (std::abs(std::sqrt(nrm) - 1.0) > 1e-6)
                throw DataError("feature set claims unit rows but row " + std::to_string(i) +
                                " is not normalized");
        }
    }
}

FeatureSet normalize_rows(FeatureSet fs) {
    if (fs.matrix.ndim() != 2) throw DataError("feature matrix must be rank 2");
    for (int64_t i = 0; i < fs.rows(); ++i) {
        Scalar nrm = 0;
        for (int64_t j = 0; j < fs.dim(); ++j) nrm += fs.matrix.at(i, j) * fs.matrix.at(i, j);
        nrm = std::sqrt(nrm);
        if (nrm <= 0.0)
            throw DataError("cannot normalize zero feature row " + std::to_string(i));
        for (int64_t j = 0; j < fs.dim(); ++j) fs.matrix.at(i, j) /= nrm;
    }
    fs.normalized = true;
    return fs;
}

void MomentAccumulator::add(const Tensor& row) {
    if (row.ndim() != 1) throw DataError("moment accumulator takes rank-1 rows");
    const int64_t d = row.size(0);
    if (n == 0) {
        mean = Tensor({d});
        m2 = Tensor({d, d});
    }
    require_shape(row, mean.shape, "moment accumulator row");
    ++n;
    Tensor delta = row - mean;
    mean.add_(delta, 1.0 / Scalar(n));
    Tensor delta2 = row - mean;
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j) m2.at(i, j) += delta[i] * delta2[j];
}

void MomentAccumulator::merge(const MomentAccumulator& o) {
    if (o.n == 0) return;
    if (n == 0) {
        *this = o;
        return;
    }
    require_shape(o.mean, mean.shape, "merged accumulator mean");
    const int64_t d = mean.size(0);
    const Scalar na = Scalar(n), nb = Scalar(o.n), nt = na + nb;
    Tensor delta = o.mean - mean;
    mean.add_(delta, nb / nt);
    m2.add_(o.m2, 1.0);
    const Scalar w = na * nb / nt;
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j) m2.at(i, j) += w * delta[i] * delta[j];
    n += o.n;
}

GaussianSummary MomentAccumulator::summary() const {
    if (n < 2) throw DataError("moment summary needs at least 2 rows, got " + std::to_string(n));
    GaussianSummary g;
    g.mean = mean;
    const int64_t d = mean.size(0);
    g.cov = Tensor({d, d});
    // Symmetrize: the streaming update is exact in expectation but its
    // rounding is not symmetric in (i, j).
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j)
            g.cov.at(i, j) = 0.5 * (m2.at(i, j) + m2.at(j, i)) / Scalar(n - 1);
    return g;
}

GaussianSummary moment_summary(const Tensor& matrix) {
    if (matrix.ndim() != 2) throw DataError("moment summary takes an (N, d) matrix");
    MomentAccumulator acc;
    for (int64_t i = 0; i < matrix.size(0); ++i) {
        Tensor row({matrix.size(1)});
        for (int64_t j = 0; j < matrix.size(1); ++j) row[j] = matrix.at(i, j);
        acc.add(row);
    }
    return acc.summary();
}

GaussianSummary moment_summary(const FeatureSet& fs) {
    fs.validate();
    return moment_summary(fs.matrix);
}

Scalar fid(const GaussianSummary& a, const GaussianSummary& b) {
    check_summary(a, "first summary");
    check_summary(b, "second summary");
    if (a.mean.size(0) != b.mean.size(0))
        throw DataError("summary dimensions differ: " + std::to_string(a.mean.size(0)) + " vs " +
                        std::to_string(b.mean.size(0)));

    const int64_t d = a.mean.size(0);
    EMatrix sa = to_eigen(a.cov), sb = to_eigen(b.cov);
    sa = 0.5 * (sa + sa.transpose()).eval();
    sb = 0.5 * (sb + sb.transpose()).eval();

    const EMatrix ra = psd_sqrt(sa, "first covariance");
    EMatrix m = ra * sb * ra;
    m = 0.5 * (m + m.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<EMatrix> es(m);
    if (es.info() != Eigen::Success)
        throw NumericError("eigendecomposition failed for the covariance product");
    Scalar tr_sqrt = 0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        const Scalar lam = es.eigenvalues()[i];
        if (lam < -1e-8)
            throw NumericError("covariance product is not positive semidefinite (eigenvalue " +
                               std::to_string(lam) + ")");
        tr_sqrt += std::sqrt(std::max<Scalar>(lam, 0.0));
    }

    Scalar dm2 = 0;
    for (int64_t i = 0; i < d; ++i) {
        const Scalar diff = a.mean[i] - b.mean[i];
        dm2 += diff * diff;
    }
    const Scalar value = dm2 + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    return std::max<Scalar>(value, 0.0);
}

ClassDistances class_distances(const FeatureSet& fs, int64_t hist_bins) {
    if (hist_bins < 1) throw UsageError("histogram needs at least one bin");
    fs.validate();
    if (fs.modalities.empty()) throw DataError("class distances need modality labels");

    std::set<int64_t> ids(fs.identities.begin(), fs.identities.end());
    if (ids.size() < 2) throw DataError("class distances need at least two identities");

    std::vector<Scalar> intra, inter;
    const int64_t n = fs.rows(), d = fs.dim();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j) {
            if (fs.modalities[size_t(i)] == fs.modalities[size_t(j)]) continue;
            Scalar d2 = 0;
            for (int64_t k = 0; k < d; ++k) {
                const Scalar diff = fs.matrix.at(i, k) - fs.matrix.at(j, k);
                d2 += diff * diff;
            }
            (fs.identities[size_t(i)] == fs.identities[size_t(j)] ? intra : inter)
                .push_back(std::sqrt(d2));
        }
    if (intra.empty() || inter.empty())
        throw DataError("degenerate label structure: need both same-identity and "
                        "cross-identity cross-modality pairs");

    Scalar hist_max = 0;
    for (Scalar v : intra) hist_max = std::max(hist_max, v);
    for (Scalar v : inter) hist_max = std::max(hist_max, v);
    if (hist_max <= 0.0) hist_max = 1.0;

    ClassDistances out;
    out.intra = stats_of(std::move(intra), hist_max, hist_bins);
    out.inter = stats_of(std::move(inter), hist_max, hist_bins);
    return out;
}

RetrievalResult cmc_map(const FeatureSet& query, const FeatureSet& gallery) {
    query.validate();
    gallery.validate();
    if (query.rows() == 0 || gallery.rows() == 0)
        throw DataError("retrieval needs non-empty query and gallery sets");
    if (query.dim() != gallery.dim())
        throw DataError("query and gallery feature dimensions differ");
    if (query.cameras.empty() || gallery.cameras.empty())
        throw DataError("retrieval needs camera labels on both sets");

    const int64_t d = query.dim(), ng = gallery.rows();
    RetrievalResult out;
    out.cmc.assign(size_t(ng), 0.0);
    std::vector<Scalar> hits(size_t(ng), 0.0);

    for (int64_t qi = 0; qi < query.rows(); ++qi) {
        const int64_t qid = query.identities[size_t(qi)];
        const int64_t qcam = query.cameras[size_t(qi)];

        bool any_relevant = false;
        std::vector<std::pair<Scalar, int64_t>> order;
        for (int64_t g = 0; g < ng; ++g) {
            if (gallery.identities[size_t(g)] == qid && gallery.cameras[size_t(g)] == qcam)
                continue;
            if (gallery.identities[size_t(g)] == qid) any_relevant = true;
            Scalar d2 = 0;
            for (int64_t j = 0; j < d; ++j) {
                const Scalar diff = query.matrix.at(qi, j) - gallery.matrix.at(g, j);
                d2 += diff * diff;
            }
            order.push_back({std::sqrt(d2), g});
        }
        if (!any_relevant) {
            ++out.skipped;
            continue;
        }
        ++out.evaluated;

        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            return a.second < b.second;
        });

        size_t first_correct = order.size();
        int64_t relevant_total = 0;
        for (size_t r = 0; r < order.size(); ++r)
            if (gallery.identities[size_t(order[r].second)] == qid) {
                ++relevant_total;
                if (first_correct == order.size()) first_correct = r;
            }
        Scalar ap = 0;
        int64_t relevant_seen = 0;
        for (size_t r = 0; r < order.size(); ++r)
            if (gallery.identities[size_t(order[r].second)] == qid) {
                ++relevant_seen;
                ap += Scalar(relevant_seen) / Scalar(r + 1);
            }
        out.map += ap / Scalar(relevant_total);
        for (size_t k = first_correct; k < hits.size(); ++k) hits[k] += 1.0;
    }

    if (out.evaluated > 0) {
        out.map /= Scalar(out.evaluated);
        for (size_t k = 0; k < out.cmc.size(); ++k) out.cmc[k] = hits[k] / Scalar(out.evaluated);
    }
    return out;
}

AttentionMapResult reduce_attention(const std::vector<Tensor>& attn, int64_t grid_h,
                                    int64_t grid_w, int64_t out_h, int64_t out_w,
                                    const std::vector<int64_t>& rows,
                                    const std::vector<std::string>& surfaces) {
    if (attn.empty()) throw UsageError("attention reduction needs at least one timestep tensor");
    if (rows.size() != surfaces.size())
        throw UsageError("token rows and surfaces must pair up");
    if (attn[0].ndim() != 3)
        throw UsageError("attention tensors must be (heads, positions, tokens)");
    const int64_t s = int64_t(surfaces.size());
    const int64_t p = grid_h * grid_w;
    for (const Tensor& a : attn)
        require_shape(a, {attn[0].size(0), p, s}, "attention tensor");
    const Scalar weight = Scalar(attn.size()) * Scalar(attn[0].size(0));

    AttentionMapResult out;
    for (int64_t j = 0; j < s; ++j) {
        TokenHeatmap tok;
        tok.row = rows[size_t(j)];
        tok.surface = surfaces[size_t(j)];
        tok.probs = Tensor({grid_h, grid_w});
        for (const Tensor& a : attn)
            for (int64_t h = 0; h < a.size(0); ++h)
                for (int64_t y = 0; y < grid_h; ++y)
                    for (int64_t x = 0; x < grid_w; ++x)
                        tok.probs.at(y, x) += a.at(h, y * grid_w + x, j) / weight;

        Tensor up = resize_bilinear(tok.probs.reshaped({1, grid_h, grid_w}), out_h, out_w);
        Scalar peak = max_abs(up);
        if (peak > 0.0) up.scale_(1.0 / peak);
        tok.map = up.reshaped({out_h, out_w});
        out.tokens.push_back(std::move(tok));
    }
    return out;
}

AttentionMapResult attention_maps(const ModelBundle& m, const PromptSpec& prompt,
                                  const Tensor& image, const AttentionMapConfig& cfg,
                                  PromptVariant variant) {
    if (cfg.timesteps.empty()) throw UsageError("attention maps need at least one timestep");
    for (Scalar t : cfg.timesteps)
        if (!(t > 0.0 && t <= Scalar(m.sched.t_max)))
            throw UsageError("attention map timestep " + std::to_string(t) +
                             " is outside (0, t_max]");
    const int64_t h = m.den.cfg.height, w = m.den.cfg.width;
    require_shape(image, {3, h, w}, "attention map image");

    const std::vector<int64_t> rows = build_prompt(m.reg, prompt, variant);
    std::vector<std::string> surfaces;
    for (int64_t row : rows) surfaces.push_back(m.reg.tokens[size_t(row)].surface);
    const Tensor cond = m.enc.encode(m.reg.table, rows, nullptr);

    auto rng = make_rng(seed_combine(cfg.seed, "attn-map"));
    std::vector<Tensor> per_step;
    for (Scalar t : cfg.timesteps) {
        const Tensor eps = Tensor::randn(image.shape, rng);
        const Tensor z = forward_noise(image, t, eps, m.sched).reshaped({1, 3, h, w});
        DenoiserTrace trace;
        denoise_predict(z, {t}, {cond}, m.den, &m.adapters, m.sched, &trace);
        per_step.push_back(trace.attn[0].attn);
    }
    return reduce_attention(per_step, h / 4, w / 4, h, w, rows, surfaces);
}

const TokenHeatmap& heatmap_for(const AttentionMapResult& r, const std::string& surface) {
    for (const TokenHeatmap& tok : r.tokens)
        if (tok.surface == surface) return tok;
    throw UsageError("token '" + surface + "' is not part of the prompt");
}

Scalar heatmap_mass(const Tensor& map, const Tensor& mask) {
    if (map.ndim() != 2) throw DataError("heatmap must be rank 2");
    if (mask.ndim() != 3 || (mask.size(0) != 1 && mask.size(0) != 3) ||
        mask.size(1) != map.size(0) || mask.size(2) != map.size(1))
        throw DataError("mask extent does not match the heatmap");
    Scalar inside = 0, total = 0;
    for (int64_t y = 0; y < map.size(0); ++y)
        for (int64_t x = 0; x < map.size(1); ++x) {
            total += map.at(y, x);
            if (mask.at(0, y, x) > 0.5) inside += map.at(y, x);
        }
    return total > 0.0 ? inside / total : 0.0;
}

void write_attention_grid(const std::string& path, const Tensor& image,
                          const AttentionMapResult& r) {
    if (image.ndim() != 3 || image.size(0) != 3)
        throw DataError("grid image must be (3, H, W)");
    const int64_t h = image.size(1), w = image.size(2), gutter = 2;
    const int64_t tiles = 1 + int64_t(r.tokens.size());
    Tensor grid({3, h, tiles * w + (tiles - 1) * gutter});
    grid.fill(1.0);

    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                grid.at(c, y, x) = std::clamp(0.5 * (image.at(c, y, x) + 1.0), 0.0, 1.0);

    for (size_t tok = 0; tok < r.tokens.size(); ++tok) {
        const Tensor& map = r.tokens[tok].map;
        require_shape(map, {h, w}, "token heatmap");
        const int64_t x0 = int64_t(tok + 1) * (w + gutter);
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) grid.at(c, y, x0 + x) = map.at(y, x);
    }
    write_png(path, grid);
}

std::string MetricReport::to_json() const {
    nlohmann::json j;
    j["extractor"] = extractor;
    auto stats_json = [](const CorpusStats& s) {
        nlohmann::json o;
        o["identities"] = s.identities;
        for (const auto& [m, count] : s.images) o["images"][to_string(m)] = count;
        for (const auto& [m, count] : s.cameras) o["cameras"][to_string(m)] = count;
        o["synthetic"] = s.synthetic;
        return o;
    };
    j["real"] = stats_json(real_stats);
    j["synthetic"] = stats_json(synthetic_stats);
    if (has_fid) j["fid"] = fid_value;
    if (has_distances) {
        auto dist_json = [](const DistanceStats& s) {
            nlohmann::json o;
            o["mean"] = s.mean;
            o["median"] = s.median;
            o["pairs"] = s.pairs;
            o["hist_max"] = s.hist_max;
            o["histogram"] = s.histogram;
            return o;
        };
        j["class_distances"]["intra"] = dist_json(distances.intra);
        j["class_distances"]["inter"] = dist_json(distances.inter);
    }
    if (has_retrieval) {
        j["retrieval"]["map"] = retrieval.map;
        j["retrieval"]["evaluated"] = retrieval.evaluated;
        j["retrieval"]["skipped"] = retrieval.skipped;
        j["retrieval"]["cmc"] = retrieval.cmc;
        for (int64_t rank : cmc_ranks)
            if (rank >= 1 && rank <= int64_t(retrieval.cmc.size()))
                j["retrieval"]["cmc_at"][std::to_string(rank)] =
                    retrieval.cmc[size_t(rank - 1)];
    }
    if (has_modality) {
        j["modality"]["infrared_rate"] = modality_infrared_rate;
        j["modality"]["train_accuracy"] = modality_train_accuracy;
    }
    if (has_attention) {
        j["attention"]["identity_mass"] = attention_identity_mass;
        j["attention"]["modality_mass"] = attention_modality_mass;
        j["attention"]["margin"] = attention_identity_mass - attention_modality_mass;
    }
    return j.dump(2);
}

std::string MetricReport::summary_table() const {
    std::ostringstream out;
    out << "extractor: " << extractor << "\n";
    if (has_fid) out << "FID: " << fid_value << "\n";
    if (has_distances)
        out << "intra mean: " << distances.intra.mean << " (" << distances.intra.pairs
            << " pairs)\ninter mean: " << distances.inter.mean << " (" << distances.inter.pairs
            << " pairs)\n";
    if (has_retrieval) {
        out << "mAP: " << retrieval.map << " over " << retrieval.evaluated << " queries ("
            << retrieval.skipped << " skipped)\n";
        for (int64_t rank : cmc_ranks)
            if (rank >= 1 && rank <= int64_t(retrieval.cmc.size()))
                out << "CMC@" << rank << ": " << retrieval.cmc[size_t(rank - 1)] << "\n";
    }
    if (has_attention)
        out << "attention mass (identity/modality): " << attention_identity_mass << " / "
            << attention_modality_mass << "\n";
    return out.str();
}

void write_metric_report(const MetricReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write metric report to " + path);
    out << r.to_json() << "\n";
}

void write_distance_histogram(const std::string& path, const ClassDistances& d) {
    const int64_t bins = int64_t(d.intra.histogram.size());
    if (bins < 1 || d.inter.histogram.size() != size_t(bins))
        throw UsageError("histograms must be non-empty and the same size");
    const int64_t bar_w = 6, plot_h = 64, gap = 4;
    const int64_t w = bins * bar_w, h = plot_h * 2 + gap;
    Tensor img({3, h, w});
    img.fill(1.0);

    auto draw = [&](const std::vector<int64_t>& hist, int64_t top, int64_t chan) {
        int64_t peak = 1;
        for (int64_t v : hist) peak = std::max(peak, v);
        for (int64_t b = 0; b < bins; ++b) {
            const int64_t bar = hist[size_t(b)] * (plot_h - 2) / peak;
            for (int64_t y = 0; y < bar; ++y)
                for (int64_t x = 0; x < bar_w - 1; ++x) {
                    const int64_t yy = top + plot_h - 1 - y, xx = b * bar_w + x;
                    for (int64_t c = 0; c < 3; ++c) img.at(c, yy, xx) = c == chan ? 0.8 : 0.1;
                }
        }
    };
    draw(d.intra.histogram, 0, 2);          // intra in blue, top panel
    draw(d.inter.histogram, plot_h + gap, 0);  // inter in red, bottom panel
    write_png(path, img);
}

}  // namespace dive
