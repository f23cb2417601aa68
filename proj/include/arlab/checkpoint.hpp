#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "arlab/optim.hpp"
#include "arlab/tensor.hpp"

namespace arlab {

// Flat binary parameter container.
//
// Layout (little-endian):
//   magic   "ALCP"            4 bytes
//   version u32               currently 1
//   count   u64               number of records
//   per record:
//     name_len u32, name bytes
//     wd_exempt u8
//     ndim u32, dims i64[ndim]
//     data f64[prod(dims)]
//
// Records appear in parameter-store order, so a round trip preserves both
// values and ordering bit-exactly.
namespace checkpoint {

inline constexpr char kMagic[4] = {'A', 'L', 'C', 'P'};
inline constexpr uint32_t kVersion = 1;

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace detail

inline void save(const ParamStore& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    detail::write_pod(os, kVersion);
    detail::write_pod(os, uint64_t(params.size()));
    for (auto& name : params.names()) {
        const Param& p = params.param(name);
        detail::write_pod(os, uint32_t(name.size()));
        os.write(name.data(), std::streamsize(name.size()));
        detail::write_pod(os, uint8_t(p.wd_exempt ? 1 : 0));
        detail::write_pod(os, uint32_t(p.value.ndim()));
        for (int64_t d : p.value.shape()) detail::write_pod(os, int64_t(d));
        os.write(reinterpret_cast<const char*>(p.value.data()),
                 std::streamsize(sizeof(double) * size_t(p.value.numel())));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline ParamStore load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
    uint32_t version = detail::read_pod<uint32_t>(is);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    uint64_t count = detail::read_pod<uint64_t>(is);
    ParamStore params;
    for (uint64_t i = 0; i < count; ++i) {
        uint32_t len = detail::read_pod<uint32_t>(is);
        std::string name(len, '\0');
        is.read(name.data(), std::streamsize(len));
        uint8_t exempt = detail::read_pod<uint8_t>(is);
        uint32_t ndim = detail::read_pod<uint32_t>(is);
        Shape shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = detail::read_pod<int64_t>(is);
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data()), std::streamsize(sizeof(double) * size_t(t.numel())));
        if (!is) throw std::runtime_error("checkpoint: truncated record '" + name + "'");
        params.add(name, std::move(t), exempt != 0);
    }
    return params;
}

}  // namespace checkpoint

}  // namespace arlab
