#include "dive/expansion.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "dive/checkpoint.hpp"
#include "dive/errors.hpp"
#include "dive/rng.hpp"

namespace fs = std::filesystem;

namespace dive {

void ExpansionPlan::validate() const {
    if (identities.empty()) throw UsageError("expansion plan has no identities");
    if (images_per_view < 1) throw UsageError("images_per_view must be at least 1");
    if (out_dir.empty()) throw UsageError("expansion plan needs an output directory");
    if (sampler_steps < 1) throw UsageError("sampler_steps must be at least 1");
    if (jobs < 1) throw UsageError("jobs must be at least 1");
    if (generate_visible)
        throw UsageError("visible synthesis is reserved but not implemented");
}

namespace {

std::vector<int64_t> infrared_view_rows(const TokenRegistry& reg) {
    std::vector<int64_t> rows;
    for (int64_t i = 0; i < reg.rows(); ++i) {
        const auto& t = reg.tokens[size_t(i)];
        if (t.kind == TokenKind::modality_view && t.modality == Modality::infrared)
            rows.push_back(i);
    }
    return rows;
}

}  // namespace

ExpansionResult expand_with_model(const ExpansionPlan& plan, const ModelBundle& m) {
    plan.validate();
    const std::vector<int64_t> views = infrared_view_rows(m.reg);
    if (views.empty()) throw DataError("registry has no infrared view tokens");

    const fs::path root(plan.out_dir);
    const fs::path image_dir = root / "images";
    fs::create_directories(image_dir);

    ExpansionResult res;
    res.manifest = (root / "i_ext_manifest.tsv").string();
    res.log_path = (root / "expansion.log").string();
    std::ofstream log(res.log_path, std::ios::app);
    if (!log) throw DataError("cannot open expansion log: " + res.log_path);

    struct Cell {
        PromptSpec prompt;
        const PlaceholderToken* id_tok = nullptr;
        const PlaceholderToken* view_tok = nullptr;
        std::string cell_id;
        uint64_t seed = 0;
        std::vector<ReidRecord> records;
        bool skipped = false;
    };
    std::vector<Cell> cells;
    for (int64_t p : plan.identities) {
        const int64_t shifted = p + m.ext_id_offset;
        if (!m.reg.has_identity(shifted))
            throw UsageError("identity " + std::to_string(p) +
                             " is not registered in the checkpoint");
        Cell cell;
        cell.prompt.identity_row = m.reg.row_of_identity(shifted);
        cell.id_tok = &m.reg.tokens[size_t(cell.prompt.identity_row)];
        for (int64_t view_row : views) {
            cell.prompt.view_row = view_row;
            cell.view_tok = &m.reg.tokens[size_t(view_row)];
            cell.cell_id = cell.id_tok->surface + ":" + cell.view_tok->surface;
            cell.seed =
                seed_combine(seed_combine(plan.seed, cell.id_tok->surface), cell.view_tok->surface);
            cells.push_back(cell);
        }
    }

    // Per-cell seeds make every image independent of scheduling, so cells can
    // run on any worker; records are assembled in plan order afterwards. Only
    // the log sees completion order.
    std::mutex log_mu;
    auto run_cell = [&](Cell& cell) {
        bool complete = true;
        for (int64_t i = 0; i < plan.images_per_view && complete; ++i) {
            const std::string name = cell.id_tok->surface + "_" + cell.view_tok->surface + "_" +
                                     std::to_string(i) + ".png";
            complete = fs::exists(image_dir / name);
        }

        const auto started = std::chrono::steady_clock::now();
        if (complete) {
            for (int64_t i = 0; i < plan.images_per_view; ++i) {
                ReidRecord rec;
                const std::string name = cell.id_tok->surface + "_" + cell.view_tok->surface +
                                         "_" + std::to_string(i) + ".png";
                rec.image_path = (image_dir / name).string();
                rec.identity = cell.id_tok->identity;
                rec.modality = cell.view_tok->modality;
                rec.camera_id = cell.view_tok->camera_id;
                rec.dataset_id = cell.view_tok->dataset_id;
                rec.is_synthetic = true;
                cell.records.push_back(std::move(rec));
            }
            cell.skipped = true;
        } else {
            try {
                for (int64_t i = 0; i < plan.images_per_view; ++i) {
                    SamplerConfig cfg;
                    cfg.steps = plan.sampler_steps;
                    cfg.method = plan.method;
                    cfg.batch = 1;
                    cfg.seed = seed_combine(cell.seed, uint64_t(i));
                    const Tensor batch = sample(m, cell.prompt, cfg);
                    auto recs =
                        write_samples(image_dir.string(), m.reg, cell.prompt, batch, i);
                    cell.records.insert(cell.records.end(), recs.begin(), recs.end());
                }
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> guard(log_mu);
                log << cell.cell_id << "\tfailed\t0\t" << cell.seed << '\n';
                log.flush();
                throw DataError("expansion cell " + cell.cell_id + " failed: " + e.what());
            }
        }
        const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                                 std::chrono::steady_clock::now() - started)
                                 .count();
        std::lock_guard<std::mutex> guard(log_mu);
        log << cell.cell_id << '\t' << (cell.skipped ? "skipped" : "done") << '\t' << elapsed
            << '\t' << cell.seed << '\n';
    };

    const size_t workers = size_t(std::min<int64_t>(plan.jobs, int64_t(cells.size())));
    if (workers <= 1) {
        for (auto& cell : cells) run_cell(cell);
    } else {
        std::atomic<size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mu;
        std::vector<std::thread> pool;
        for (size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (;;) {
                    const size_t idx = next.fetch_add(1);
                    if (idx >= cells.size()) return;
                    {
                        std::lock_guard<std::mutex> guard(failure_mu);
                        if (failure) return;
                    }
                    try {
                        run_cell(cells[idx]);
                    } catch (...) {
                        std::lock_guard<std::mutex> guard(failure_mu);
                        if (!failure) failure = std::current_exception();
                        return;
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }

    std::vector<ReidRecord> records;
    for (auto& cell : cells) {
        if (cell.skipped)
            ++res.cells_skipped;
        else
            ++res.cells_done;
        records.insert(records.end(), std::make_move_iterator(cell.records.begin()),
                       std::make_move_iterator(cell.records.end()));
    }
    if (!log) throw DataError("write failed: " + res.log_path);

    res.i_ext = ReidCorpus::from_records(std::move(records));
    ReidCorpus rel = res.i_ext;
    for (auto& rec : rel.records)
        rec.image_path = (fs::path("images") / fs::path(rec.image_path).filename()).string();
    write_manifest(rel, res.manifest);
    return res;
}

ExpansionResult expand(const ExpansionPlan& plan) {
    plan.validate();
    CheckpointReader reader(plan.checkpoint);
    const ModelBundle m = load_model(reader);
    return expand_with_model(plan, m);
}

MergedCorpora finalize_merge(const ReidCorpus& vi, const ReidCorpus& v_ext,
                             const ReidCorpus& i_ext, int64_t id_offset) {
    std::vector<ReidRecord> vi_v, vi_i;
    for (const auto& r : vi.records)
        (r.modality == Modality::visible ? vi_v : vi_i).push_back(r);

    for (const auto& r : v_ext.records)
        if (r.modality != Modality::visible)
            throw DataError("external corpus contains non-visible record " + r.image_path);
    for (const auto& r : i_ext.records)
        if (r.modality != Modality::infrared)
            throw DataError("synthetic corpus contains non-infrared record " + r.image_path);

    std::set<int64_t> ext_shifted;
    for (int64_t p : v_ext.identity_set) ext_shifted.insert(p + id_offset);
    for (int64_t p : i_ext.identity_set)
        if (!ext_shifted.count(p))
            throw DataError("identity namespace mismatch: synthetic identity " +
                            std::to_string(p) + " has no external visible source");
    std::vector<int64_t> orphans;
    for (int64_t p : ext_shifted)
        if (!i_ext.identity_set.count(p)) orphans.push_back(p);
    if (!orphans.empty()) {
        std::ostringstream msg;
        msg << "external identities without synthetic infrared counterparts:";
        for (int64_t p : orphans) msg << ' ' << p;
        throw DataError(msg.str());
    }

    MergedCorpora out;
    std::vector<ReidRecord> v_star = vi_v;
    for (auto r : v_ext.records) {
        r.identity += id_offset;
        v_star.push_back(std::move(r));
    }
    std::vector<ReidRecord> i_star = vi_i;
    i_star.insert(i_star.end(), i_ext.records.begin(), i_ext.records.end());
    out.v_star = ReidCorpus::from_records(std::move(v_star));
    out.i_star = ReidCorpus::from_records(std::move(i_star));
    return out;
}

MergedCorpora finalize_merge(const ReidCorpus& vi, const ReidCorpus& v_ext,
                             const ReidCorpus& i_ext) {
    return finalize_merge(vi, v_ext, i_ext, default_id_offset(vi));
}

}  // namespace dive
