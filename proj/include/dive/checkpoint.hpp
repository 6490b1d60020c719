#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dive/tensor.hpp"

namespace dive {

// Versioned binary key/value container. Tensors are stored as float32;
// loading converts back to the working precision.
class CheckpointWriter {
  public:
    void put_tensor(const std::string& key, const Tensor& t);
    void put_i64(const std::string& key, int64_t v);
    void put_string(const std::string& key, const std::string& v);
    void save(const std::string& path) const;

  private:
    struct Entry {
        uint8_t kind;  // 0 tensor, 1 i64, 2 string
        Shape shape;
        std::vector<float> f32;
        int64_t i64 = 0;
        std::string str;
    };
    std::map<std::string, Entry> entries_;
};

class CheckpointReader {
  public:
    explicit CheckpointReader(const std::string& path);
    bool has(const std::string& key) const { return entries_.count(key) > 0; }
    bool is_tensor(const std::string& key) const {
        auto it = entries_.find(key);
        return it != entries_.end() && it->second.kind == 0;
    }
    Tensor tensor(const std::string& key) const;
    int64_t i64(const std::string& key) const;
    std::string string(const std::string& key) const;
    std::vector<std::string> keys_with_prefix(const std::string& prefix) const;

  private:
    struct Entry {
        uint8_t kind;
        Shape shape;
        std::vector<float> f32;
        int64_t i64 = 0;
        std::string str;
    };
    const Entry& get(const std::string& key, uint8_t kind) const;
    std::map<std::string, Entry> entries_;
    std::string path_;
};

}  // namespace dive
