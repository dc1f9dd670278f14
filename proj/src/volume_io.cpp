#include "dc2fusion/volume_io.hpp"

#include <cmath>
#include <fstream>

#include "dc2fusion/wire.hpp"

namespace dc2f {

void save_volume(const std::string& path, const Volume& volume) {
    if (volume.voxels.size() != volume.size()) throw DataError("volume payload length inconsistent with dims");
    for (float v : volume.voxels)
        if (!std::isfinite(v)) throw DataError("non-finite values: refusing to write volume");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write volume: " + path);
    wire::put_magic(os, "VOL3");
    wire::put_u8(os, 1);
    for (std::uint32_t d : volume.dims) wire::put_u32(os, d);
    wire::put_u8(os, 0);  // dtype float32 LE
    for (float v : volume.voxels) wire::put_f32(os, v);
    if (!os) throw DataError("volume write failed: " + path);
}

Volume load_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open volume: " + path);
    wire::expect_magic(is, "VOL3", "volume file");
    if (wire::get_u8(is, "volume version") != 1) throw DataError("unsupported volume version");
    Volume v;
    for (auto& d : v.dims) d = wire::get_u32(is, "volume dims");
    if (wire::get_u8(is, "volume dtype") != 0) throw DataError("unsupported volume dtype");
    const std::size_t n = v.size();
    v.voxels.resize(n);
    for (std::size_t i = 0; i < n; ++i) v.voxels[i] = wire::get_f32(is, "volume payload");
    for (float x : v.voxels)
        if (!std::isfinite(x)) throw DataError("non-finite values in volume payload");
    return v;
}

}  // namespace dc2f
