#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "octfew/autodiff.hpp"
#include "octfew/tensor.hpp"

namespace octfew {

// On-disk snapshot format shared by GAN checkpoints and classifier models:
// a directory holding header.json (metadata + name/shape index) and one
// little-endian float32 blob file per named tensor.
//
//   dir/
//     header.json   {schema_version, kind, meta{...}, tensors:[{name,shape,file}]}
//     t0000.bin ... one blob per tensor, index order matches the header
struct BlobStore {
    static constexpr const char* kSchemaVersion = "1";

    std::string kind;
    nlohmann::ordered_json meta;
    // insertion-ordered names with tensors; ordered map keeps writes canonical
    std::vector<std::pair<std::string, Tensor>> tensors;

    void add(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t); }

    // Serializes every parameter of `ps` in name order.
    static BlobStore from_params(const std::string& kind, const ad::ParamStore& ps,
                                 nlohmann::ordered_json meta);

    // Loads all tensors into existing parameters of `ps` (names and shapes
    // must match exactly); throws listing missing/extra names otherwise.
    void load_into(ad::ParamStore& ps) const;

    std::map<std::string, Tensor> as_map() const;

    void write(const std::filesystem::path& dir) const;
    static BlobStore read(const std::filesystem::path& dir);
};

}  // namespace octfew
