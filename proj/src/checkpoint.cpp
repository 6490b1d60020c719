#include "dive/checkpoint.hpp"

#include <fstream>

#include "dive/errors.hpp"

namespace dive {

namespace {

constexpr char kMagic[8] = {'D', 'I', 'V', 'E', 'C', 'K', 'P', '1'};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("checkpoint truncated");
    return v;
}

void write_str(std::ostream& out, const std::string& s) {
    write_pod<uint64_t>(out, s.size());
    out.write(s.data(), std::streamsize(s.size()));
}

std::string read_str(std::istream& in) {
    const auto n = read_pod<uint64_t>(in);
    if (n > (1ull << 32)) throw DataError("checkpoint string length implausible");
    std::string s(n, '\0');
    in.read(s.data(), std::streamsize(n));
    if (!in) throw DataError("checkpoint truncated");
    return s;
}

}  // namespace

void CheckpointWriter::put_tensor(const std::string& key, const Tensor& t) {
    Entry e;
    e.kind = 0;
    e.shape = t.shape;
    e.f32.resize(t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) e.f32[i] = float(t.data[i]);
    entries_[key] = std::move(e);
}

void CheckpointWriter::put_i64(const std::string& key, int64_t v) {
    Entry e;
    e.kind = 1;
    e.i64 = v;
    entries_[key] = std::move(e);
}

void CheckpointWriter::put_string(const std::string& key, const std::string& v) {
    Entry e;
    e.kind = 2;
    e.str = v;
    entries_[key] = std::move(e);
}

void CheckpointWriter::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write(kMagic, 8);
    write_pod<uint64_t>(out, entries_.size());
    for (const auto& [key, e] : entries_) {
        write_str(out, key);
        write_pod<uint8_t>(out, e.kind);
        if (e.kind == 0) {
            write_pod<uint32_t>(out, uint32_t(e.shape.size()));
            for (int64_t d : e.shape) write_pod<int64_t>(out, d);
            out.write(reinterpret_cast<const char*>(e.f32.data()),
                      std::streamsize(e.f32.size() * sizeof(float)));
        } else if (e.kind == 1) {
            write_pod<int64_t>(out, e.i64);
        } else {
            write_str(out, e.str);
        }
    }
    if (!out) throw DataError("write failed: " + path);
}

CheckpointReader::CheckpointReader(const std::string& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != std::string(kMagic, 8))
        throw DataError("not a checkpoint file: " + path);
    const auto n = read_pod<uint64_t>(in);
    for (uint64_t i = 0; i < n; ++i) {
        const std::string key = read_str(in);
        Entry e;
        e.kind = read_pod<uint8_t>(in);
        if (e.kind == 0) {
            const auto ndim = read_pod<uint32_t>(in);
            e.shape.resize(ndim);
            for (auto& d : e.shape) d = read_pod<int64_t>(in);
            e.f32.resize(size_t(numel_of(e.shape)));
            in.read(reinterpret_cast<char*>(e.f32.data()),
                    std::streamsize(e.f32.size() * sizeof(float)));
            if (!in) throw DataError("checkpoint truncated in tensor " + key);
        } else if (e.kind == 1) {
            e.i64 = read_pod<int64_t>(in);
        } else if (e.kind == 2) {
            e.str = read_str(in);
        } else {
            throw DataError("checkpoint has unknown entry kind for " + key);
        }
        entries_[key] = std::move(e);
    }
}

const CheckpointReader::Entry& CheckpointReader::get(const std::string& key, uint8_t kind) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw DataError("checkpoint " + path_ + " missing key " + key);
    if (it->second.kind != kind) throw DataError("checkpoint key " + key + " has wrong type");
    return it->second;
}

Tensor CheckpointReader::tensor(const std::string& key) const {
    const Entry& e = get(key, 0);
    Tensor t = Tensor::zeros(e.shape);
    for (size_t i = 0; i < e.f32.size(); ++i) t.data[i] = Scalar(e.f32[i]);
    return t;
}

int64_t CheckpointReader::i64(const std::string& key) const { return get(key, 1).i64; }

std::string CheckpointReader::string(const std::string& key) const { return get(key, 2).str; }

std::vector<std::string> CheckpointReader::keys_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, _] : entries_)
        if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
}

}  // namespace dive
