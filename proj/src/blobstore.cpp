#include "octfew/blobstore.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace octfew {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little,
              "blob files are little-endian; big-endian hosts need byte swaps");

namespace {

std::string blob_name(size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "t%04zu.bin", index);
    return buf;
}

void write_blob(const fs::path& p, const Tensor& t) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open blob for writing: " + p.string());
    std::vector<float> buf(static_cast<size_t>(t.numel()));
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f) throw std::runtime_error("short write on blob: " + p.string());
}

Tensor read_blob(const fs::path& p, const std::vector<int64_t>& shape) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open blob: " + p.string());
    const int64_t n = Tensor::count(shape);
    std::vector<float> buf(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (f.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
        throw std::runtime_error("blob shorter than its declared shape: " + p.string());
    Tensor t(shape);
    for (size_t i = 0; i < buf.size(); ++i) t[i] = static_cast<double>(buf[i]);
    return t;
}

}  // namespace

BlobStore BlobStore::from_params(const std::string& kind, const ad::ParamStore& ps,
                                 ordered_json meta) {
    BlobStore b;
    b.kind = kind;
    b.meta = std::move(meta);
    for (const auto& [name, var] : ps.all()) b.add(name, var->value);
    return b;
}

void BlobStore::load_into(ad::ParamStore& ps) const {
    std::vector<std::string> missing, extra;
    std::map<std::string, const Tensor*> have;
    for (const auto& [name, t] : tensors) have[name] = &t;
    for (const auto& [name, var] : ps.all()) {
        auto it = have.find(name);
        if (it == have.end()) {
            missing.push_back(name);
            continue;
        }
        if (!(it->second->shape() == var->value.shape()))
            throw std::runtime_error("tensor shape mismatch for '" + name + "': file has " +
                                     Tensor::shape_str(it->second->shape()) + ", model expects " +
                                     Tensor::shape_str(var->value.shape()));
        have.erase(it);
    }
    for (const auto& [name, t] : have) extra.push_back(name);
    if (!missing.empty() || !extra.empty()) {
        std::string msg = "parameter schema mismatch;";
        if (!missing.empty()) {
            msg += " missing:";
            for (const auto& n : missing) msg += " " + n;
        }
        if (!extra.empty()) {
            msg += " extra:";
            for (const auto& n : extra) msg += " " + n;
        }
        throw std::runtime_error(msg);
    }
    for (const auto& [name, t] : tensors) ps.get(name)->value = t;
}

std::map<std::string, Tensor> BlobStore::as_map() const {
    std::map<std::string, Tensor> m;
    for (const auto& [name, t] : tensors) m.emplace(name, t);
    return m;
}

void BlobStore::write(const fs::path& dir) const {
    fs::create_directories(dir);
    ordered_json header;
    header["schema_version"] = kSchemaVersion;
    header["kind"] = kind;
    header["meta"] = meta;
    ordered_json index = ordered_json::array();
    for (size_t i = 0; i < tensors.size(); ++i) {
        const auto& [name, t] = tensors[i];
        ordered_json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["file"] = blob_name(i);
        index.push_back(e);
        write_blob(dir / blob_name(i), t);
    }
    header["tensors"] = index;
    std::ofstream f(dir / "header.json");
    if (!f) throw std::runtime_error("cannot write header: " + (dir / "header.json").string());
    f << header.dump(2) << "\n";
}

BlobStore BlobStore::read(const fs::path& dir) {
    std::ifstream f(dir / "header.json");
    if (!f) throw std::runtime_error("cannot open header: " + (dir / "header.json").string());
    ordered_json header;
    f >> header;
    const std::string ver = header.at("schema_version").get<std::string>();
    if (ver != kSchemaVersion)
        throw std::runtime_error("snapshot schema version mismatch: file has '" + ver +
                                 "', this build reads '" + kSchemaVersion + "'");
    BlobStore b;
    b.kind = header.at("kind").get<std::string>();
    b.meta = header.value("meta", ordered_json::object());
    for (const auto& e : header.at("tensors")) {
        const auto shape = e.at("shape").get<std::vector<int64_t>>();
        b.tensors.emplace_back(e.at("name").get<std::string>(),
                               read_blob(dir / e.at("file").get<std::string>(), shape));
    }
    return b;
}

}  // namespace octfew
