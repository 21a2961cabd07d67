#include "rflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace rflow {

namespace {

// The toolchains this targets are little-endian; serialize by memcpy.
static_assert(std::endian::native == std::endian::little);

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    check(static_cast<bool>(is), Err::BadMagic, "truncated checkpoint: " + path);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors) {
    std::ofstream os(path, std::ios::binary);
    check(os.good(), Err::DataMissing, "cannot open for write: " + path);
    os.write("RFLW", 4);
    put<uint32_t>(os, kCheckpointVersion);
    put<uint32_t>(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<uint32_t>(os, static_cast<uint32_t>(t.rank()));
        for (size_t e : t.shape()) put<uint64_t>(os, static_cast<uint64_t>(e));
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    check(os.good(), Err::Internal, "write failed: " + path);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.good(), Err::DataMissing, "cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    check(is.good() && std::memcmp(magic, "RFLW", 4) == 0, Err::BadMagic,
          "not a checkpoint file: " + path);
    uint32_t version = get<uint32_t>(is, path);
    check(version == kCheckpointVersion, Err::CheckpointMismatch,
          "checkpoint version " + std::to_string(version) + " unsupported: " + path);
    uint32_t count = get<uint32_t>(is, path);

    std::map<std::string, Tensor> out;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = get<uint32_t>(is, path);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        check(static_cast<bool>(is), Err::BadMagic, "truncated checkpoint: " + path);
        uint32_t rank = get<uint32_t>(is, path);
        Shape shape(rank);
        for (auto& e : shape) e = static_cast<size_t>(get<uint64_t>(is, path));
        std::vector<double> data(shape_numel(shape));
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        check(static_cast<bool>(is), Err::BadMagic, "truncated checkpoint: " + path);
        check(out.emplace(name, Tensor::from_data(shape, std::move(data))).second,
              Err::BadMagic, "duplicate tensor name in checkpoint: " + name);
    }
    return out;
}

void save_parameters(const std::string& path, const Parameters& params) {
    std::map<std::string, Tensor> m;
    for (const auto& [name, t] : params) m.emplace(name, t);
    save_checkpoint(path, m);
}

void load_parameters(const std::string& path, Parameters& params) {
    auto loaded = load_checkpoint(path);
    check(loaded.size() == params.size(), Err::CheckpointMismatch,
          "checkpoint holds " + std::to_string(loaded.size()) + " tensors, model expects " +
              std::to_string(params.size()));
    for (auto& [name, t] : params) {
        auto it = loaded.find(name);
        check(it != loaded.end(), Err::CheckpointMismatch, "checkpoint missing tensor " + name);
        check(it->second.shape() == t.shape(), Err::CheckpointMismatch,
              "tensor " + name + " shape " + shape_str(it->second.shape()) +
                  " does not match model " + shape_str(t.shape()));
        t.raw_data() = it->second.data();
    }
}

}  // namespace rflow
