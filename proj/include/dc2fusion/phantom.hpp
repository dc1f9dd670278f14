#pragma once

// Synthetic paired-modality phantoms standing in for registered MRI/PET:
// shared ellipsoid anatomy, a structural modality with sharp boundaries and an
// activity modality made of smoothed blobs. Generation is a pure function of
// PhantomSpec (seed included), so pairs are bit-reproducible.

#include <cstdint>

#include "dc2fusion/rng.hpp"
#include "dc2fusion/volume_io.hpp"

namespace dc2f {

struct PhantomSpec {
    std::uint64_t seed = 0;
    std::uint32_t size = 32;         // cubic extent; must be >= 16
    int min_ellipsoids = 3;
    int max_ellipsoids = 8;
    float line_width = 1.0f;         // structural boundary shell half-width (voxels)
    float blob_sigma = 2.5f;         // activity smoothing
    float noise_amp = 0.01f;
};

VolumePair generate_phantom_pair(const PhantomSpec& spec);

// The 24 orientation-preserving right-angle rotations of a cube, exact voxel
// permutations. orientation 0 is the identity.
Volume rotate_cube(const Volume& v, int orientation);

// same random rotation applied to both volumes; preserves registration
VolumePair augment_rotate(const VolumePair& pair, Rng& rng);

struct SplitIndices {
    std::vector<std::size_t> train, val, test;
};

// deterministic shuffled 0.8/0.1/0.1 split; n must be >= 10
SplitIndices make_splits(std::size_t n, std::uint64_t seed);

}  // namespace dc2f
