#pragma once

// VOL3 volume files and the in-memory Volume type.
//
// File layout (all little-endian):
//   magic   "VOL3" (4 bytes)
//   version u8 = 1
//   dims    3 x u32 (X, Y, Z)
//   dtype   u8 = 0 (float32 LE)
//   payload X*Y*Z float32 values, x-fastest: index = x + X*(y + Y*z)
//
// Dataset volumes hold finite values in [0,1]; the loader enforces finiteness.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dc2fusion/common.hpp"
#include "dc2fusion/tensor.hpp"

namespace dc2f {

struct Volume {
    std::array<std::uint32_t, 3> dims{0, 0, 0};  // X, Y, Z
    std::vector<float> voxels;                   // x-fastest

    std::size_t size() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    float at(std::size_t x, std::size_t y, std::size_t z) const {
        return voxels[x + dims[0] * (y + static_cast<std::size_t>(dims[1]) * z)];
    }
    float& at(std::size_t x, std::size_t y, std::size_t z) {
        return voxels[x + dims[0] * (y + static_cast<std::size_t>(dims[1]) * z)];
    }
    bool cubic() const { return dims[0] == dims[1] && dims[1] == dims[2]; }
};

struct VolumePair {
    Volume mri, pet;
};

void save_volume(const std::string& path, const Volume& volume);
Volume load_volume(const std::string& path);

// conversions between the x-fastest file order and [1,X,Y,Z] tensors

template <class T>
Tensor<T> volume_to_tensor(const Volume& v) {
    const std::size_t X = v.dims[0], Y = v.dims[1], Z = v.dims[2];
    Tensor<T> t = Tensor<T>::zeros({1, X, Y, Z});
    T* p = t.data();
    for (std::size_t z = 0; z < Z; ++z)
        for (std::size_t y = 0; y < Y; ++y)
            for (std::size_t x = 0; x < X; ++x) p[(x * Y + y) * Z + z] = static_cast<T>(v.at(x, y, z));
    return t;
}

template <class T>
Volume tensor_to_volume(const Tensor<T>& t) {
    if (t.dim() != 4 || t.extent(0) != 1) throw ShapeError("tensor_to_volume: expected [1,X,Y,Z]");
    Volume v;
    v.dims = {static_cast<std::uint32_t>(t.extent(1)), static_cast<std::uint32_t>(t.extent(2)),
              static_cast<std::uint32_t>(t.extent(3))};
    v.voxels.resize(v.size());
    const T* p = t.data();
    const std::size_t X = v.dims[0], Y = v.dims[1], Z = v.dims[2];
    for (std::size_t z = 0; z < Z; ++z)
        for (std::size_t y = 0; y < Y; ++y)
            for (std::size_t x = 0; x < X; ++x) v.at(x, y, z) = static_cast<float>(p[(x * Y + y) * Z + z]);
    return v;
}

}  // namespace dc2f
