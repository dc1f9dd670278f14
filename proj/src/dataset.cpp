#include "dc2fusion/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace dc2f {

namespace fs = std::filesystem;

static std::string sample_id(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "p%04zu", index);
    return buf;
}

std::vector<DatasetEntry> generate_dataset(const std::string& root, std::size_t count, std::uint32_t size,
                                           std::uint64_t seed) {
    SplitIndices splits = make_splits(count, seed);
    std::vector<DatasetEntry> entries(count);
    auto assign = [&](const std::vector<std::size_t>& idx, const char* split) {
        for (std::size_t i : idx) entries[i] = {sample_id(i), split, Rng(seed).derive(0xDA7A0000ULL + i).next_u64()};
    };
    assign(splits.train, "train");
    assign(splits.val, "val");
    assign(splits.test, "test");

    std::error_code ec;
    fs::create_directories(root, ec);
    for (const char* split : {"train", "val", "test"}) fs::create_directories(fs::path(root) / split, ec);
    if (!fs::is_directory(root)) throw DataError("cannot create dataset directory: " + root);

    for (const auto& e : entries) {
        PhantomSpec spec;
        spec.seed = e.seed;
        spec.size = size;
        VolumePair pair = generate_phantom_pair(spec);
        const fs::path dir = fs::path(root) / e.split;
        save_volume((dir / (e.id + "_mri.vol3")).string(), pair.mri);
        save_volume((dir / (e.id + "_pet.vol3")).string(), pair.pet);
    }

    std::ofstream manifest(fs::path(root) / "manifest.csv");
    if (!manifest) throw DataError("cannot write manifest: " + root);
    manifest << "id,split,seed\n";
    for (const auto& e : entries) manifest << e.id << ',' << e.split << ',' << e.seed << '\n';
    return entries;
}

std::vector<std::string> list_split_ids(const std::string& root, const std::string& split) {
    const fs::path dir = fs::path(root) / split;
    if (!fs::is_directory(dir)) throw DataError("missing dataset split directory: " + dir.string());
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        const std::string suffix = "_mri.vol3";
        if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            ids.push_back(name.substr(0, name.size() - suffix.size()));
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

VolumePair load_pair(const std::string& root, const std::string& split, const std::string& id) {
    const fs::path dir = fs::path(root) / split;
    VolumePair pair;
    pair.mri = load_volume((dir / (id + "_mri.vol3")).string());
    pair.pet = load_volume((dir / (id + "_pet.vol3")).string());
    if (pair.mri.dims != pair.pet.dims) throw DataError("modality volumes disagree on dims for sample " + id);
    return pair;
}

}  // namespace dc2f
