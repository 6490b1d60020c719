#include "dive/cli.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dive/errors.hpp"
#include "dive/eval.hpp"
#include "dive/expansion.hpp"
#include "dive/features.hpp"
#include "dive/image_io.hpp"
#include "dive/reid_dataset.hpp"
#include "dive/sampler.hpp"
#include "dive/toy_corpus.hpp"
#include "dive/trainer.hpp"

namespace fs = std::filesystem;

namespace dive::cli {
namespace {

struct OptDef {
    std::string key;
    std::string help;
    std::string def;
};

struct SubSpec {
    std::string name;
    std::string desc;
    std::vector<OptDef> opts;
};

// Hyperparameters shared by train and toy-demo.
std::vector<OptDef> train_opts() {
    return {
        {"learning_rate", "Adam learning rate", "5e-5"},
        {"batch_size", "training batch size", "16"},
        {"steps", "total optimization steps", "2000"},
        {"height", "image height in pixels", "32"},
        {"width", "image width in pixels", "16"},
        {"horizontal_flip", "true|false: random horizontal flip augmentation", "true"},
        {"seed", "training seed (batch order, noise draws)", "0"},
        {"model_seed", "seed for frozen weights and token init", "0"},
        {"d_text", "token embedding dimension", "256"},
        {"checkpoint_every", "steps between periodic checkpoints", "500"},
        {"lora_rank", "adapter rank on attention q/k/v", "128"},
        {"lora_scale", "adapter output scale", "8"},
    };
}

// Evaluation knobs shared by evaluate and toy-demo.
std::vector<OptDef> eval_opts() {
    return {
        {"extractor", "feature extractor: toy-embed|raw-pixel", "toy-embed"},
        {"embed_steps", "toy-embed training steps", "400"},
        {"embed_seed", "toy-embed training seed", "0"},
        {"clf_steps", "modality classifier training steps", "300"},
        {"clf_seed", "modality classifier training seed", "0"},
        {"hist_bins", "distance histogram bins", "20"},
    };
}

std::vector<SubSpec> build_subspecs() {
    std::vector<SubSpec> specs;

    specs.push_back({"ingest",
                     "load a corpus from one source and write the canonical manifest",
                     {
                         {"manifest", "existing canonical manifest to re-ingest", ""},
                         {"market_root", "directory tree with ID_cCsS-style file names", ""},
                         {"sysu_root", "directory tree with camN/<identity>/<image>", ""},
                         {"min_images", "keep identities with strictly more records than this",
                          "0"},
                         {"out", "output directory", "."},
                     }});

    specs.push_back({"stats",
                     "print the corpus table for a manifest",
                     {
                         {"manifest", "canonical manifest to summarize", ""},
                         {"out", "output directory", "."},
                     }});

    {
        SubSpec train{"train",
                      "learn identity tokens and attention adapters over two corpora",
                      {
                          {"vi_manifest", "manifest of the dual-modality corpus", ""},
                          {"ext_manifest", "manifest of the visible-only corpus", ""},
                          {"resume", "checkpoint to resume from", ""},
                      }};
        for (auto& o : train_opts()) train.opts.push_back(o);
        train.opts.push_back({"out", "output directory", "."});
        specs.push_back(std::move(train));
    }

    specs.push_back(
        {"sample",
         "generate images for one (identity, view) prompt from a checkpoint",
         {
             {"checkpoint", "trained checkpoint", ""},
             {"identity", "identity label as numbered in its source corpus", ""},
             {"external", "true|false: identity is from the visible-only corpus", "false"},
             {"modality", "view modality: visible|infrared", "infrared"},
             {"camera", "view camera id", "0"},
             {"dataset_id", "view dataset id (inferred when unambiguous)", ""},
             {"count", "number of images", "1"},
             {"steps", "sampler steps", "25"},
             {"method", "multistep_2nd_order|first_order", "multistep_2nd_order"},
             {"sampler_seed", "sampling seed", "0"},
             {"variant", "prompt variant: full|identity_only|modality_only", "full"},
             {"out", "output directory", "."},
         }});

    specs.push_back(
        {"expand",
         "synthesize infrared images for external identities and write their manifest",
         {
             {"checkpoint", "trained checkpoint", ""},
             {"identities", "'all' or comma-separated external identity labels", "all"},
             {"images_per_view", "images per (identity, view) cell", "18"},
             {"steps", "sampler steps", "25"},
             {"method", "multistep_2nd_order|first_order", "multistep_2nd_order"},
             {"seed", "expansion seed", "0"},
             {"jobs", "worker threads over cells", "1"},
             {"out", "output directory", "."},
         }});

    {
        SubSpec ev{"evaluate",
                   "score a synthetic corpus against the real corpus it extends",
                   {
                       {"real_manifest", "manifest of the real dual-modality corpus", ""},
                       {"synthetic_manifest", "manifest of the synthetic infrared corpus", ""},
                       {"paired_visible_manifest",
                        "manifest of the visible images the synthesis was driven by", ""},
                       {"id_offset",
                        "identity offset used at merge time (-1: derive from the real corpus)",
                        "-1"},
                   }};
        for (auto& o : eval_opts()) ev.opts.push_back(o);
        ev.opts.push_back(
            {"normalize", "true|false: L2-normalize features for distances/retrieval", "true"});
        ev.opts.push_back({"out", "output directory", "."});
        specs.push_back(std::move(ev));
    }

    {
        SubSpec demo{"toy-demo",
                     "end to end on a generated corpus: render, train, expand, evaluate",
                     {
                         {"toy_vi_identities", "dual-modality identities", "8"},
                         {"toy_ext_identities", "visible-only identities", "4"},
                         {"toy_cameras", "cameras per modality", "2"},
                         {"toy_images_per_cell", "images per (identity, modality, camera)", "6"},
                         {"toy_seed", "corpus rendering seed", "0"},
                     }};
        for (auto& o : train_opts()) demo.opts.push_back(o);
        demo.opts.push_back({"steps", "total optimization steps", "1500"});
        demo.opts.push_back({"images_per_view", "synthetic images per (identity, view)", "6"});
        demo.opts.push_back({"sampler_steps", "sampler steps", "25"});
        demo.opts.push_back(
            {"method", "multistep_2nd_order|first_order", "multistep_2nd_order"});
        demo.opts.push_back({"expand_seed", "expansion seed", "0"});
        for (auto& o : eval_opts()) demo.opts.push_back(o);
        demo.opts.push_back(
            {"attention", "true|false: write token attention maps and masses", "true"});
        demo.opts.push_back({"attn_seed", "attention map noise seed", "0"});
        demo.opts.push_back({"jobs", "worker threads over expansion cells", "1"});
        demo.opts.push_back({"out", "output directory", "."});
        // "steps" was appended twice (shared block + demo default); keep the
        // demo-specific one.
        auto first = std::find_if(demo.opts.begin(), demo.opts.end(),
                                  [](const OptDef& o) { return o.key == "steps"; });
        demo.opts.erase(first);
        specs.push_back(std::move(demo));
    }
    return specs;
}

// ---------------------------------------------------------------------------
// Typed access to the effective key/value configuration.

int64_t parse_i64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const int64_t r = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw UsageError("invalid integer for " + key + ": '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const uint64_t r = std::stoull(v, &used);
        if (used != v.size() || (!v.empty() && v[0] == '-')) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw UsageError("invalid unsigned integer for " + key + ": '" + v + "'");
    }
}

Scalar parse_f64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const Scalar r = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw UsageError("invalid number for " + key + ": '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    std::string s;
    for (char c : v) s.push_back(char(std::tolower(static_cast<unsigned char>(c))));
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw UsageError("invalid boolean for " + key + ": '" + v + "'");
}

struct Cfg {
    std::string subcommand;
    std::map<std::string, std::string> kv;

    const std::string& str(const std::string& key) const { return kv.at(key); }
    std::string required(const std::string& key) const {
        const std::string& v = kv.at(key);
        if (v.empty()) throw UsageError("--" + key + " is required");
        return v;
    }
    int64_t i64(const std::string& key) const { return parse_i64(key, kv.at(key)); }
    uint64_t u64(const std::string& key) const { return parse_u64(key, kv.at(key)); }
    Scalar f64(const std::string& key) const { return parse_f64(key, kv.at(key)); }
    bool flag(const std::string& key) const { return parse_bool(key, kv.at(key)); }
};

std::string env_name(const std::string& key) {
    std::string s = "DIVE_";
    for (char c : key) s.push_back(char(std::toupper(static_cast<unsigned char>(c))));
    return s;
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

// Flat `key = value` file; '#' starts a comment. Unknown keys are errors so a
// typo cannot silently fall back to a default.
std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty())
            throw UsageError(path + ":" + std::to_string(lineno) + ": empty key");
        kv[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

void write_snapshot(const Cfg& cfg) {
    const fs::path dir(cfg.kv.at("out"));
    fs::create_directories(dir);
    const fs::path path = dir / "effective_config.txt";
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "subcommand = " << cfg.subcommand << "\n";
    for (const auto& [k, v] : cfg.kv) out << k << " = " << v << "\n";
    if (!out) throw DataError("write failed: " + path.string());
}

ReidCorpus relativized(const ReidCorpus& c, const fs::path& base) {
    ReidCorpus out = c;
    for (auto& rec : out.records) {
        const fs::path p = fs::absolute(rec.image_path).lexically_normal();
        const fs::path rel = p.lexically_relative(base);
        if (!rel.empty() && rel.native()[0] != '.') rec.image_path = rel.string();
    }
    return out;
}

Tensor load_image_pm1(const std::string& path, int64_t h, int64_t w) {
    Tensor img = read_png(path);
    if (img.size(1) != h || img.size(2) != w) img = resize_bilinear(img, h, w);
    for (auto& v : img.data) v = 2.0 * v - 1.0;
    return img;
}

// ---------------------------------------------------------------------------
// Subcommand bodies. All throw dive errors; dispatch maps them to exit codes.

int run_ingest(const Cfg& cfg, std::ostream& out) {
    const std::string manifest = cfg.str("manifest");
    const std::string market = cfg.str("market_root");
    const std::string sysu = cfg.str("sysu_root");
    const int given = int(!manifest.empty()) + int(!market.empty()) + int(!sysu.empty());
    if (given != 1)
        throw UsageError("pass exactly one of --manifest, --market_root, --sysu_root");

    ReidCorpus corpus;
    int64_t skipped = 0;
    if (!manifest.empty())
        corpus = ingest_manifest(manifest);
    else if (!market.empty())
        corpus = ingest_market_layout(market, &skipped);
    else
        corpus = ingest_sysu_layout(sysu);

    const int64_t min_images = cfg.i64("min_images");
    if (min_images > 0) {
        const auto keep = select_identities(corpus, min_images);
        const std::set<int64_t> keep_set(keep.begin(), keep.end());
        std::vector<ReidRecord> records;
        for (const auto& r : corpus.records)
            if (keep_set.count(r.identity)) records.push_back(r);
        if (records.empty())
            throw DataError("no identity has more than " + std::to_string(min_images) +
                            " images");
        corpus = ReidCorpus::from_records(std::move(records));
    }

    for (auto& rec : corpus.records)
        rec.image_path = fs::absolute(rec.image_path).lexically_normal().string();

    const fs::path dest = fs::path(cfg.str("out")) / "ingested_manifest.tsv";
    write_manifest(corpus, dest.string());
    out << format_stats(corpus_stats(corpus));
    if (skipped > 0) out << "skipped files: " << skipped << "\n";
    out << "manifest: " << dest.string() << "\n";
    return 0;
}

int run_stats(const Cfg& cfg, std::ostream& out) {
    const ReidCorpus corpus = ingest_manifest(cfg.required("manifest"));
    out << format_stats(corpus_stats(corpus));
    return 0;
}

TrainConfig train_config_from(const Cfg& cfg) {
    TrainConfig tc;
    tc.learning_rate = cfg.f64("learning_rate");
    tc.batch_size = cfg.i64("batch_size");
    tc.total_steps = cfg.i64("steps");
    tc.height = cfg.i64("height");
    tc.width = cfg.i64("width");
    tc.horizontal_flip = cfg.flag("horizontal_flip");
    tc.seed = cfg.u64("seed");
    tc.checkpoint_every = cfg.i64("checkpoint_every");
    tc.lora_rank = cfg.i64("lora_rank");
    tc.lora_scale = cfg.f64("lora_scale");
    tc.validate();
    return tc;
}

int run_train(const Cfg& cfg, std::ostream& out) {
    const fs::path dir(cfg.str("out"));
    const TrainConfig tc = train_config_from(cfg);

    std::unique_ptr<Trainer> trainer;
    ReidCorpus vi, ext;
    if (cfg.str("resume").empty()) {
        vi = ingest_manifest(cfg.required("vi_manifest"));
        ext = ingest_manifest(cfg.required("ext_manifest"));
        const uint64_t model_seed = cfg.u64("model_seed");
        TokenRegistry reg = TokenRegistry::create(cfg.i64("d_text"), model_seed);
        const int64_t off = register_corpus_tokens(reg, vi, ext, model_seed);
        ModelBundle m = make_model(tc, std::move(reg), model_seed);
        m.ext_id_offset = off;
        trainer = std::make_unique<Trainer>(tc, std::move(m));
    } else {
        trainer = Trainer::load(cfg.str("resume"), &tc);
        vi = ingest_manifest(cfg.required("vi_manifest"));
        ext = ingest_manifest(cfg.required("ext_manifest"));
    }

    const auto examples = build_training_set(vi, ext, trainer->model().reg,
                                             trainer->model().ext_id_offset, tc.height, tc.width);
    out << "training on " << examples.size() << " images, steps " << trainer->step() + 1
        << ".." << tc.total_steps << "\n";
    const fs::path ckpt_dir = dir / "checkpoints";
    fs::create_directories(ckpt_dir);
    const TrainResult result =
        trainer->run(examples, ckpt_dir.string(), (dir / "loss_curve.tsv").string());

    const fs::path final_path = dir / "checkpoint.dive";
    trainer->save(final_path.string());
    if (!result.curve.empty())
        out << "final loss: " << result.curve.back().loss << " at step "
            << result.curve.back().step << "\n";
    out << "checkpoint: " << final_path.string() << "\n";
    return 0;
}

int run_sample(const Cfg& cfg, std::ostream& out) {
    CheckpointReader reader(cfg.required("checkpoint"));
    const ModelBundle m = load_model(reader);

    const Modality modality = parse_modality(cfg.str("modality"));
    std::string dataset_id = cfg.str("dataset_id");
    if (dataset_id.empty()) {
        std::set<std::string> ids;
        for (const auto& t : m.reg.tokens)
            if (t.kind == TokenKind::modality_view && t.modality == modality)
                ids.insert(t.dataset_id);
        if (ids.empty()) throw DataError("checkpoint has no view tokens for that modality");
        if (ids.size() > 1)
            throw UsageError("multiple datasets match; pass --dataset_id");
        dataset_id = *ids.begin();
    }

    int64_t identity = cfg.i64("identity");
    if (cfg.flag("external")) identity += m.ext_id_offset;
    if (!m.reg.has_identity(identity))
        throw UsageError("identity " + cfg.str("identity") +
                         " is not registered in the checkpoint");

    PromptSpec prompt;
    prompt.identity_row = m.reg.row_of_identity(identity);
    prompt.view_row = m.reg.row_of_view(modality, cfg.i64("camera"), dataset_id);

    SamplerConfig sc;
    sc.steps = cfg.i64("steps");
    sc.method = parse_sampler_method(cfg.str("method"));
    sc.seed = cfg.u64("sampler_seed");
    sc.batch = cfg.i64("count");
    const PromptVariant variant = parse_prompt_variant(cfg.str("variant"));

    const Tensor batch = sample(m, prompt, sc, nullptr, variant);
    const auto records = write_samples(cfg.str("out"), m.reg, prompt, batch, 0);
    out << "prompt: " << prompt_string(m.reg, prompt, variant) << "\n";
    for (const auto& r : records) out << r.image_path << "\n";
    return 0;
}

std::vector<int64_t> parse_identities(const std::string& value, const ModelBundle& m) {
    std::vector<int64_t> ids;
    if (value == "all") {
        for (const auto& t : m.reg.tokens)
            if (t.kind == TokenKind::identity && t.identity >= m.ext_id_offset)
                ids.push_back(t.identity - m.ext_id_offset);
        std::sort(ids.begin(), ids.end());
        if (ids.empty()) throw DataError("checkpoint has no external identities");
        return ids;
    }
    std::stringstream ss(value);
    std::string part;
    while (std::getline(ss, part, ',')) ids.push_back(parse_i64("identities", trim(part)));
    if (ids.empty()) throw UsageError("empty --identities list");
    return ids;
}

int run_expand(const Cfg& cfg, std::ostream& out) {
    CheckpointReader reader(cfg.required("checkpoint"));
    const ModelBundle m = load_model(reader);

    ExpansionPlan plan;
    plan.checkpoint = cfg.str("checkpoint");
    plan.identities = parse_identities(cfg.str("identities"), m);
    plan.images_per_view = cfg.i64("images_per_view");
    plan.sampler_steps = cfg.i64("steps");
    plan.method = parse_sampler_method(cfg.str("method"));
    plan.seed = cfg.u64("seed");
    plan.jobs = cfg.i64("jobs");
    plan.out_dir = cfg.str("out");

    const ExpansionResult res = expand_with_model(plan, m);
    out << "cells done: " << res.cells_done << ", skipped: " << res.cells_skipped << "\n";
    out << "images: " << res.i_ext.records.size() << "\n";
    out << "manifest: " << res.manifest << "\n";
    return 0;
}

struct EvalKnobs {
    std::string extractor;
    int64_t embed_steps = 400;
    uint64_t embed_seed = 0;
    int64_t clf_steps = 300;
    uint64_t clf_seed = 0;
    int64_t hist_bins = 20;
    bool normalize = true;
};

EvalKnobs eval_knobs_from(const Cfg& cfg, bool normalize) {
    EvalKnobs k;
    k.extractor = cfg.str("extractor");
    k.embed_steps = cfg.i64("embed_steps");
    k.embed_seed = cfg.u64("embed_seed");
    k.clf_steps = cfg.i64("clf_steps");
    k.clf_seed = cfg.u64("clf_seed");
    k.hist_bins = cfg.i64("hist_bins");
    k.normalize = normalize;
    return k;
}

ReidCorpus filter_modality(const ReidCorpus& c, Modality m) {
    std::vector<ReidRecord> records;
    for (const auto& r : c.records)
        if (r.modality == m) records.push_back(r);
    if (records.empty()) throw DataError("corpus has no " + to_string(m) + " records");
    return ReidCorpus::from_records(std::move(records));
}

// Scores synth against real; when paired is present, also merges and runs
// distances plus infrared-to-visible retrieval on the expanded corpus.
MetricReport evaluate_corpora(const ReidCorpus& real, const ReidCorpus& synth,
                              const ReidCorpus* paired, int64_t id_offset, const EvalKnobs& k,
                              std::ostream& out) {
    MetricReport report;
    report.real_stats = corpus_stats(real);
    report.synthetic_stats = corpus_stats(synth);

    std::unique_ptr<FeatureExtractor> ex;
    if (k.extractor == "toy-embed") {
        ToyEmbedderConfig ec;
        ec.steps = k.embed_steps;
        ec.seed = k.embed_seed;
        auto emb = train_toy_embedder(real, ec);
        out << "toy-embed train accuracy: " << emb.train_accuracy << "\n";
        ex = std::make_unique<ToyEmbedder>(std::move(emb));
    } else if (k.extractor == "raw-pixel") {
        ex = std::make_unique<RawPixelExtractor>();
    } else {
        throw UsageError("unknown extractor: " + k.extractor);
    }
    report.extractor = ex->name();

    const ReidCorpus real_ir = filter_modality(real, Modality::infrared);
    const FeatureSet fid_real = features_of_corpus(real_ir, *ex, false);
    const FeatureSet fid_synth = features_of_corpus(synth, *ex, false);
    report.has_fid = true;
    report.fid_value = fid(moment_summary(fid_real), moment_summary(fid_synth));

    ModalityClassifierConfig cc;
    cc.steps = k.clf_steps;
    cc.seed = k.clf_seed;
    const ModalityClassifier clf = train_modality_classifier(real, cc);
    int64_t infrared = 0;
    for (const auto& r : synth.records)
        if (clf.predict(read_png(r.image_path)) == Modality::infrared) ++infrared;
    report.has_modality = true;
    report.modality_train_accuracy = clf.train_accuracy;
    report.modality_infrared_rate = Scalar(infrared) / Scalar(synth.records.size());

    if (paired != nullptr) {
        const MergedCorpora merged = finalize_merge(real, *paired, synth, id_offset);
        std::vector<ReidRecord> all = merged.v_star.records;
        all.insert(all.end(), merged.i_star.records.begin(), merged.i_star.records.end());
        const ReidCorpus expanded = ReidCorpus::from_records(std::move(all));
        const FeatureSet fs_all = features_of_corpus(expanded, *ex, k.normalize);
        report.has_distances = true;
        report.distances = class_distances(fs_all, k.hist_bins);

        FeatureSet query = features_of_corpus(merged.i_star, *ex, k.normalize);
        FeatureSet gallery = features_of_corpus(merged.v_star, *ex, k.normalize);
        // Camera ids are numbered per modality, so an infrared query and a
        // visible gallery image can share a camera number without sharing a
        // camera. Shift the gallery namespace so the same-camera exclusion
        // only ever fires on true duplicates.
        for (auto& cam : gallery.cameras) cam += 1000;
        report.has_retrieval = true;
        report.retrieval = cmc_map(query, gallery);
    }
    return report;
}

int run_evaluate(const Cfg& cfg, std::ostream& out) {
    const ReidCorpus real = ingest_manifest(cfg.required("real_manifest"));
    const ReidCorpus synth = ingest_manifest(cfg.required("synthetic_manifest"));
    ReidCorpus paired;
    const bool has_paired = !cfg.str("paired_visible_manifest").empty();
    if (has_paired) paired = ingest_manifest(cfg.str("paired_visible_manifest"));

    int64_t id_offset = cfg.i64("id_offset");
    if (id_offset < 0) id_offset = default_id_offset(real);

    const EvalKnobs knobs = eval_knobs_from(cfg, cfg.flag("normalize"));
    const MetricReport report =
        evaluate_corpora(real, synth, has_paired ? &paired : nullptr, id_offset, knobs, out);

    const fs::path dir(cfg.str("out"));
    write_metric_report(report, (dir / "metrics.json").string());
    if (report.has_distances)
        write_distance_histogram((dir / "distance_hist.png").string(), report.distances);
    out << report.summary_table();
    out << "report: " << (dir / "metrics.json").string() << "\n";
    return 0;
}

int run_toy_demo(const Cfg& cfg, std::ostream& out) {
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&t0] {
        return std::chrono::duration_cast<std::chrono::seconds>(
                   std::chrono::steady_clock::now() - t0)
            .count();
    };
    const fs::path dir = fs::absolute(cfg.str("out")).lexically_normal();

    ToyCorpusConfig tcfg;
    tcfg.vi_identities = cfg.i64("toy_vi_identities");
    tcfg.ext_identities = cfg.i64("toy_ext_identities");
    tcfg.cameras_per_modality = cfg.i64("toy_cameras");
    tcfg.images_per_cell = cfg.i64("toy_images_per_cell");
    tcfg.height = cfg.i64("height");
    tcfg.width = cfg.i64("width");
    tcfg.seed = cfg.u64("toy_seed");
    const ToyCorpus corpus = write_toy_corpus((dir / "corpus").string(), tcfg);
    out << "[" << elapsed() << "s] corpus: " << corpus.vi.records.size() << " + "
        << corpus.ext.records.size() << " images\n";

    const TrainConfig tc = train_config_from(cfg);
    const uint64_t model_seed = cfg.u64("model_seed");
    TokenRegistry reg = TokenRegistry::create(cfg.i64("d_text"), model_seed);
    const int64_t off = register_corpus_tokens(reg, corpus.vi, corpus.ext, model_seed);
    ModelBundle model = make_model(tc, std::move(reg), model_seed);
    model.ext_id_offset = off;
    Trainer trainer(tc, std::move(model));
    const auto examples =
        build_training_set(corpus.vi, corpus.ext, trainer.model().reg, off, tc.height, tc.width);
    const fs::path ckpt_dir = dir / "checkpoints";
    fs::create_directories(ckpt_dir);
    const TrainResult tr =
        trainer.run(examples, ckpt_dir.string(), (dir / "loss_curve.tsv").string());
    const fs::path ckpt = dir / "checkpoint.dive";
    trainer.save(ckpt.string());
    out << "[" << elapsed() << "s] trained " << tc.total_steps << " steps, final loss "
        << (tr.curve.empty() ? 0.0 : tr.curve.back().loss) << "\n";

    ExpansionPlan plan;
    plan.checkpoint = ckpt.string();
    for (int64_t p : corpus.ext.identity_set) plan.identities.push_back(p);
    plan.images_per_view = cfg.i64("images_per_view");
    plan.sampler_steps = cfg.i64("sampler_steps");
    plan.method = parse_sampler_method(cfg.str("method"));
    plan.seed = cfg.u64("expand_seed");
    plan.jobs = cfg.i64("jobs");
    plan.out_dir = (dir / "expanded").string();
    const ExpansionResult res = expand_with_model(plan, trainer.model());
    out << "[" << elapsed() << "s] expansion: " << res.i_ext.records.size() << " images ("
        << res.cells_done << " cells done, " << res.cells_skipped << " skipped)\n";

    const MergedCorpora merged = finalize_merge(corpus.vi, corpus.ext, res.i_ext, off);
    write_manifest(relativized(merged.v_star, dir), (dir / "v_star_manifest.tsv").string());
    write_manifest(relativized(merged.i_star, dir), (dir / "i_star_manifest.tsv").string());

    const EvalKnobs knobs = eval_knobs_from(cfg, true);
    MetricReport report = evaluate_corpora(corpus.vi, res.i_ext, &corpus.ext, off, knobs, out);
    out << "[" << elapsed() << "s] evaluation done\n";

    if (cfg.flag("attention")) {
        const int64_t first_id = *corpus.vi.identity_set.begin();
        const ReidRecord* pick = nullptr;
        for (const auto& r : corpus.vi.records)
            if (r.identity == first_id && r.modality == Modality::infrared) {
                pick = &r;
                break;
            }
        if (pick == nullptr) throw DataError("no infrared record for the first identity");

        const ModelBundle& m = trainer.model();
        PromptSpec prompt;
        prompt.identity_row = m.reg.row_of_identity(first_id);
        prompt.view_row = m.reg.row_of_view(Modality::infrared, pick->camera_id,
                                            pick->dataset_id);
        const Tensor image = load_image_pm1(pick->image_path, tc.height, tc.width);
        AttentionMapConfig acfg;
        acfg.seed = cfg.u64("attn_seed");
        const AttentionMapResult maps = attention_maps(m, prompt, image, acfg);
        write_attention_grid((dir / "attention.png").string(), image, maps);

        const Tensor mask = read_png(toy_mask_path(pick->image_path));
        const std::string id_surface = m.reg.tokens[size_t(prompt.identity_row)].surface;
        const std::string view_surface = m.reg.tokens[size_t(prompt.view_row)].surface;
        report.has_attention = true;
        report.attention_identity_mass = heatmap_mass(heatmap_for(maps, id_surface).map, mask);
        report.attention_modality_mass =
            heatmap_mass(heatmap_for(maps, view_surface).map, mask);
        out << "[" << elapsed() << "s] attention maps written\n";
    }

    write_metric_report(report, (dir / "metrics.json").string());
    if (report.has_distances)
        write_distance_histogram((dir / "distance_hist.png").string(), report.distances);
    out << report.summary_table();
    out << "artifacts under " << dir.string() << "\n";
    return 0;
}

}  // namespace

int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    const std::vector<SubSpec> specs = build_subspecs();

    CLI::App app{"dive: disentangled prompt learning and cross-modality data expansion"};
    app.set_help_all_flag("--help-all", "print options for every subcommand");
    app.require_subcommand(1);
    app.footer("Every option doubles as a config key: file (--config, key = value lines) <\n"
               "DIVE_<KEY> environment variables < flags, highest wins. Each run writes\n"
               "effective_config.txt into the output directory; rerunning a subcommand with\n"
               "--config <that file> reproduces it.");

    struct SubState {
        CLI::App* sub = nullptr;
        const SubSpec* spec = nullptr;
        std::map<std::string, std::string> raw;
        std::string config_path;
    };
    std::vector<SubState> states(specs.size());
    for (size_t i = 0; i < specs.size(); ++i) {
        SubState& st = states[i];
        st.spec = &specs[i];
        st.sub = app.add_subcommand(specs[i].name, specs[i].desc);
        st.sub->add_option("--config", st.config_path,
                           "flat key = value file applied below environment and flags");
        for (const OptDef& o : specs[i].opts)
            st.sub->add_option("--" + o.key, st.raw[o.key],
                               o.help + (o.def.empty() ? "" : " [default: " + o.def + "]"));
    }

    std::vector<std::string> argv_storage;
    argv_storage.reserve(args.size() + 1);
    argv_storage.push_back("dive");
    for (auto& a : args) argv_storage.push_back(a);
    std::vector<const char*> argv;
    for (auto& s : argv_storage) argv.push_back(s.c_str());

    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e, out, err);
        return rc == 0 ? 0 : 1;
    }

    const SubState* active = nullptr;
    for (const auto& st : states)
        if (st.sub->parsed()) active = &st;
    if (active == nullptr) {
        err << "no subcommand selected\n";
        return 1;
    }

    try {
        Cfg cfg;
        cfg.subcommand = active->spec->name;
        for (const OptDef& o : active->spec->opts) cfg.kv[o.key] = o.def;

        if (!active->config_path.empty()) {
            for (const auto& [k, v] : read_config_file(active->config_path)) {
                if (k == "subcommand") {
                    if (v != cfg.subcommand)
                        throw UsageError("config file is for subcommand '" + v + "', not '" +
                                         cfg.subcommand + "'");
                    continue;
                }
                if (!cfg.kv.count(k))
                    throw UsageError("unknown config key for " + cfg.subcommand + ": " + k);
                cfg.kv[k] = v;
            }
        }
        for (auto& [k, v] : cfg.kv)
            if (const char* env = std::getenv(env_name(k).c_str())) v = env;
        for (const OptDef& o : active->spec->opts)
            if (active->sub->count("--" + o.key) > 0) cfg.kv[o.key] = active->raw.at(o.key);

        write_snapshot(cfg);

        if (cfg.subcommand == "ingest") return run_ingest(cfg, out);
        if (cfg.subcommand == "stats") return run_stats(cfg, out);
        if (cfg.subcommand == "train") return run_train(cfg, out);
        if (cfg.subcommand == "sample") return run_sample(cfg, out);
        if (cfg.subcommand == "expand") return run_expand(cfg, out);
        if (cfg.subcommand == "evaluate") return run_evaluate(cfg, out);
        if (cfg.subcommand == "toy-demo") return run_toy_demo(cfg, out);
        err << "unhandled subcommand: " << cfg.subcommand << "\n";
        return 1;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace dive::cli
