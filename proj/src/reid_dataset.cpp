#include "dive/reid_dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "dive/errors.hpp"

namespace fs = std::filesystem;

namespace dive {

std::string to_string(Modality m) { return m == Modality::visible ? "visible" : "infrared"; }

Modality parse_modality(const std::string& s) {
    if (s == "visible") return Modality::visible;
    if (s == "infrared") return Modality::infrared;
    throw DataError("unknown modality '" + s + "' (expected visible|infrared)");
}

ReidCorpus ReidCorpus::from_records(std::vector<ReidRecord> records) {
    ReidCorpus c;
    std::map<Modality, std::set<int64_t>> cams;
    for (const auto& r : records) {
        if (r.identity < 0) throw DataError("negative identity in record " + r.image_path);
        if (r.camera_id < 0) throw DataError("negative camera_id in record " + r.image_path);
        c.identity_set.insert(r.identity);
        cams[r.modality].insert(r.camera_id);
    }
    for (const auto& [m, ids] : cams) c.modality_views[m] = int64_t(ids.size());
    c.records = std::move(records);
    return c;
}

ReidCorpus ingest_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest: " + path);
    std::vector<ReidRecord> records;
    std::set<std::string> seen_paths;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::string field;
        std::istringstream ls(line);
        while (std::getline(ls, field, '\t')) fields.push_back(field);
        if (fields.size() != 5 && fields.size() != 6)
            throw DataError("manifest line " + std::to_string(lineno) + ": expected 5 or 6 fields, got " +
                            std::to_string(fields.size()));
        ReidRecord r;
        // Relative paths are resolved against the manifest's directory so a
        // corpus tree can be moved or compared as a unit.
        if (fs::path(fields[0]).is_relative())
            r.image_path = (fs::path(path).parent_path() / fields[0]).lexically_normal().string();
        else
            r.image_path = fields[0];
        try {
            r.identity = std::stoll(fields[1]);
            r.camera_id = std::stoll(fields[3]);
        } catch (const std::exception&) {
            throw DataError("manifest line " + std::to_string(lineno) + ": bad integer field");
        }
        try {
            r.modality = parse_modality(fields[2]);
        } catch (const DataError& e) {
            throw DataError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
        r.dataset_id = fields[4];
        if (fields.size() == 6) r.is_synthetic = (fields[5] == "1" || fields[5] == "true");
        if (!seen_paths.insert(r.image_path).second)
            throw DataError("manifest line " + std::to_string(lineno) + ": duplicate path " +
                            r.image_path);
        records.push_back(std::move(r));
    }
    return ReidCorpus::from_records(std::move(records));
}

void write_manifest(const ReidCorpus& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest: " + path);
    out << "# path\tidentity\tmodality\tcamera_id\tdataset_id\tsynthetic\n";
    for (const auto& r : corpus.records)
        out << r.image_path << '\t' << r.identity << '\t' << to_string(r.modality) << '\t'
            << r.camera_id << '\t' << r.dataset_id << '\t' << (r.is_synthetic ? 1 : 0) << '\n';
    if (!out) throw DataError("write failed: " + path);
}

ReidCorpus ingest_market_layout(const std::string& root, int64_t* skipped) {
    if (!fs::is_directory(root)) throw DataError("not a directory: " + root);
    static const std::regex name_re(R"(^(-?\d+)_c(\d+).*\.(jpg|jpeg|png)$)", std::regex::icase);
    std::vector<ReidRecord> records;
    int64_t skip_count = 0;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
        std::smatch m;
        const std::string name = p.filename().string();
        if (!std::regex_match(name, m, name_re)) {
            ++skip_count;
            continue;
        }
        const int64_t id = std::stoll(m[1].str());
        if (id <= 0) {  // -1 junk and 0000 distractors carry no usable identity
            ++skip_count;
            continue;
        }
        ReidRecord r;
        r.image_path = p.string();
        r.identity = id;
        r.modality = Modality::visible;
        r.camera_id = std::stoll(m[2].str()) - 1;
        r.dataset_id = "market";
        records.push_back(std::move(r));
    }
    if (skipped) *skipped = skip_count;
    if (records.empty()) throw DataError("no usable Market-style images under " + root);
    return ReidCorpus::from_records(std::move(records));
}

ReidCorpus ingest_sysu_layout(const std::string& root) {
    if (!fs::is_directory(root)) throw DataError("not a directory: " + root);
    // Camera number -> (modality, within-modality camera index).
    const std::map<int, std::pair<Modality, int64_t>> cam_map = {
        {1, {Modality::visible, 0}}, {2, {Modality::visible, 1}},  {4, {Modality::visible, 2}},
        {5, {Modality::visible, 3}}, {3, {Modality::infrared, 0}}, {6, {Modality::infrared, 1}},
    };
    std::vector<ReidRecord> records;
    std::vector<fs::path> cams;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) cams.push_back(e.path());
    std::sort(cams.begin(), cams.end());
    for (const auto& cam_dir : cams) {
        const std::string cam_name = cam_dir.filename().string();
        if (cam_name.rfind("cam", 0) != 0) continue;
        int cam_no = 0;
        try {
            cam_no = std::stoi(cam_name.substr(3));
        } catch (const std::exception&) {
            continue;
        }
        auto it = cam_map.find(cam_no);
        if (it == cam_map.end())
            throw DataError("unexpected camera directory " + cam_name + " under " + root);
        std::vector<fs::path> id_dirs;
        for (const auto& e : fs::directory_iterator(cam_dir))
            if (e.is_directory()) id_dirs.push_back(e.path());
        std::sort(id_dirs.begin(), id_dirs.end());
        for (const auto& id_dir : id_dirs) {
            int64_t id = 0;
            try {
                id = std::stoll(id_dir.filename().string());
            } catch (const std::exception&) {
                throw DataError("non-numeric identity directory " + id_dir.string());
            }
            std::vector<fs::path> images;
            for (const auto& e : fs::directory_iterator(id_dir))
                if (e.is_regular_file()) images.push_back(e.path());
            std::sort(images.begin(), images.end());
            for (const auto& img : images) {
                ReidRecord r;
                r.image_path = img.string();
                r.identity = id;
                r.modality = it->second.first;
                r.camera_id = it->second.second;
                r.dataset_id = "sysu";
                records.push_back(std::move(r));
            }
        }
    }
    if (records.empty()) throw DataError("no usable SYSU-style images under " + root);
    return ReidCorpus::from_records(std::move(records));
}

std::vector<int64_t> select_identities(const ReidCorpus& corpus, int64_t min_images) {
    if (min_images < 0) throw DataError("min_images must be >= 0");
    std::map<int64_t, int64_t> counts;
    for (const auto& r : corpus.records) ++counts[r.identity];
    std::vector<int64_t> out;
    for (const auto& [id, n] : counts)
        if (n > min_images) out.push_back(id);  // strict: "more than min_images"
    return out;
}

int64_t default_id_offset(const ReidCorpus& base) {
    return base.identity_set.empty() ? 0 : *base.identity_set.rbegin() + 1;
}

ReidCorpus merge(const MergePlan& plan) {
    if (!plan.base || !plan.external) throw DataError("merge plan missing corpora");
    const int64_t min_offset = default_id_offset(*plan.base);
    if (plan.id_offset < min_offset)
        throw DataError("merge offset " + std::to_string(plan.id_offset) +
                        " below required minimum " + std::to_string(min_offset));
    std::vector<ReidRecord> records = plan.base->records;
    for (ReidRecord r : plan.external->records) {
        r.identity += plan.id_offset;
        records.push_back(std::move(r));
    }
    return ReidCorpus::from_records(std::move(records));
}

CorpusStats corpus_stats(const ReidCorpus& corpus) {
    CorpusStats s;
    s.identities = int64_t(corpus.identity_set.size());
    s.cameras = corpus.modality_views;
    for (const auto& r : corpus.records) {
        ++s.images[r.modality];
        if (r.is_synthetic) ++s.synthetic;
    }
    return s;
}

std::string format_stats(const CorpusStats& s) {
    std::ostringstream out;
    out << "identities: " << s.identities << "\n";
    for (Modality m : {Modality::visible, Modality::infrared}) {
        const auto img = s.images.count(m) ? s.images.at(m) : 0;
        const auto cam = s.cameras.count(m) ? s.cameras.at(m) : 0;
        out << to_string(m) << ": " << img << " images, " << cam << " cameras\n";
    }
    out << "synthetic: " << s.synthetic << "\n";
    return out.str();
}

}  // namespace dive
