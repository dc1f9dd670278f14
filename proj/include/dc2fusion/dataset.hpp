#pragma once

// Dataset directory layout: <root>/<split>/<id>_{mri,pet}.vol3 plus a
// manifest.csv (id,split,seed) at the root. Generation is deterministic in
// (count, size, seed): two runs produce byte-identical trees.

#include <string>
#include <vector>

#include "dc2fusion/phantom.hpp"
#include "dc2fusion/volume_io.hpp"

namespace dc2f {

struct DatasetEntry {
    std::string id;
    std::string split;  // train | val | test
    std::uint64_t seed = 0;
};

std::vector<DatasetEntry> generate_dataset(const std::string& root, std::size_t count, std::uint32_t size,
                                           std::uint64_t seed);

// ids present in one split directory, lexicographically sorted
std::vector<std::string> list_split_ids(const std::string& root, const std::string& split);

VolumePair load_pair(const std::string& root, const std::string& split, const std::string& id);

}  // namespace dc2f
