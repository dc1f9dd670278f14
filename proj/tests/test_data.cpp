#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "dc2fusion/dataset.hpp"
#include "dc2fusion/phantom.hpp"

using namespace dc2f;
namespace fs = std::filesystem;

namespace {

double edge_fraction(const Volume& v) {
    const std::size_t n = v.dims[0];
    std::size_t edges = 0;
    auto at = [&](long long x, long long y, long long z) {
        auto c = [&](long long i) { return static_cast<std::size_t>(std::clamp<long long>(i, 0, n - 1)); };
        return static_cast<double>(v.at(c(x), c(y), c(z)));
    };
    for (std::size_t z = 0; z < n; ++z)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const double gx = 0.5 * (at(x + 1, y, z) - at(static_cast<long long>(x) - 1, y, z));
                const double gy = 0.5 * (at(x, y + 1, z) - at(x, static_cast<long long>(y) - 1, z));
                const double gz = 0.5 * (at(x, y, z + 1) - at(x, y, static_cast<long long>(z) - 1));
                if (std::sqrt(gx * gx + gy * gy + gz * gz) > 0.1) ++edges;
            }
    return static_cast<double>(edges) / static_cast<double>(v.size());
}

std::vector<float> sorted_values(const Volume& v) {
    std::vector<float> s = v.voxels;
    std::sort(s.begin(), s.end());
    return s;
}

}  // namespace

TEST_CASE("phantom generation is deterministic and in range") {
    PhantomSpec spec;
    spec.seed = 42;
    spec.size = 32;
    VolumePair a = generate_phantom_pair(spec);
    VolumePair b = generate_phantom_pair(spec);
    CHECK(a.mri.voxels == b.mri.voxels);  // bit-identical
    CHECK(a.pet.voxels == b.pet.voxels);

    for (float v : a.mri.voxels) {
        CHECK(v >= 0.f);
        CHECK(v <= 1.f);
    }
    for (float v : a.pet.voxels) {
        CHECK(v >= 0.f);
        CHECK(v <= 1.f);
    }
}

TEST_CASE("phantom size precondition") {
    PhantomSpec spec;
    spec.size = 12;
    CHECK_THROWS_WITH_AS(generate_phantom_pair(spec), doctest::Contains("size too small"), DataError);
}

TEST_CASE("structural modality carries at least twice the edge content (20 seeds)") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        PhantomSpec spec;
        spec.seed = seed;
        spec.size = 32;
        VolumePair p = generate_phantom_pair(spec);
        const double ea = edge_fraction(p.mri);
        const double eb = edge_fraction(p.pet);
        CAPTURE(seed);
        CHECK(ea >= 2.0 * eb);
    }
}

TEST_CASE("phantoms are non-degenerate: at least 1% of voxels above 0.5") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        PhantomSpec spec;
        spec.seed = seed;
        spec.size = 32;
        VolumePair p = generate_phantom_pair(spec);
        auto frac_hi = [](const Volume& v) {
            std::size_t hi = 0;
            for (float x : v.voxels) hi += x > 0.5f;
            return static_cast<double>(hi) / static_cast<double>(v.size());
        };
        CAPTURE(seed);
        CHECK(frac_hi(p.mri) >= 0.01);
        CHECK(frac_hi(p.pet) >= 0.01);
    }
}

TEST_CASE("VOL3 round trip and error taxonomy") {
    const fs::path dir = fs::temp_directory_path() / "dc2f_vol3_test";
    fs::create_directories(dir);
    Rng rng(7);
    Volume v;
    v.dims = {8, 8, 8};
    v.voxels.resize(512);
    for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());

    const std::string path = (dir / "v.vol3").string();
    save_volume(path, v);
    Volume back = load_volume(path);
    CHECK(back.dims == v.dims);
    CHECK(back.voxels == v.voxels);  // bit-exact

    // wrong magic
    {
        std::ofstream os((dir / "magic.vol3").string(), std::ios::binary);
        os << "XXXX";
        os.write(reinterpret_cast<const char*>(v.voxels.data()), 64);
    }
    CHECK_THROWS_WITH_AS(load_volume((dir / "magic.vol3").string()), doctest::Contains("bad magic"), DataError);

    // truncated payload
    {
        std::ifstream is(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        std::ofstream os((dir / "trunc.vol3").string(), std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_WITH_AS(load_volume((dir / "trunc.vol3").string()), doctest::Contains("truncated"), DataError);

    // non-finite payload
    Volume bad = v;
    bad.voxels[100] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_WITH_AS(save_volume((dir / "nan.vol3").string(), bad), doctest::Contains("non-finite"), DataError);

    fs::remove_all(dir);
}

TEST_CASE("rotations: identity, period-4 elements, multiset preservation") {
    PhantomSpec spec;
    spec.seed = 5;
    spec.size = 16;
    Volume v = generate_phantom_pair(spec).mri;

    Volume id = rotate_cube(v, 0);
    CHECK(id.voxels == v.voxels);

    // every orientation permutes voxels: the sorted multiset is invariant
    auto base = sorted_values(v);
    for (int o = 0; o < 24; ++o) CHECK(sorted_values(rotate_cube(v, o)) == base);

    // some orientation is a quarter turn about one axis: period 4, not 2
    int quarter_turns = 0;
    for (int o = 1; o < 24; ++o) {
        Volume r1 = rotate_cube(v, o);
        Volume r2 = rotate_cube(r1, o);
        Volume r4 = rotate_cube(rotate_cube(r2, o), o);
        if (r4.voxels == v.voxels && r2.voxels != v.voxels) ++quarter_turns;
    }
    CHECK(quarter_turns >= 6);  // 3 axes x 2 directions

    CHECK_THROWS_AS(rotate_cube(Volume{{4, 4, 8}, std::vector<float>(128, 0.f)}, 1), DataError);
}

TEST_CASE("augmentation applies one rotation to both volumes") {
    PhantomSpec spec;
    spec.seed = 9;
    spec.size = 16;
    VolumePair p = generate_phantom_pair(spec);
    Rng rng(1234);
    VolumePair r = augment_rotate(p, rng);
    CHECK(sorted_values(r.mri) == sorted_values(p.mri));
    CHECK(sorted_values(r.pet) == sorted_values(p.pet));

    // registration preserved: the mri rotation index also maps pet
    bool found = false;
    for (int o = 0; o < 24 && !found; ++o) {
        if (rotate_cube(p.mri, o).voxels == r.mri.voxels) {
            CHECK(rotate_cube(p.pet, o).voxels == r.pet.voxels);
            found = true;
        }
    }
    CHECK(found);
}

TEST_CASE("splits: paper-scale counts, disjoint and exhaustive, deterministic") {
    SplitIndices s = make_splits(660, 99);
    CHECK(s.train.size() == 528);
    CHECK(s.val.size() == 66);
    CHECK(s.test.size() == 66);

    std::vector<bool> seen(660, false);
    for (auto* part : {&s.train, &s.val, &s.test})
        for (std::size_t i : *part) {
            CHECK_FALSE(seen[i]);
            seen[i] = true;
        }
    CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));

    SplitIndices s2 = make_splits(660, 99);
    CHECK(s.train == s2.train);
    CHECK(s.val == s2.val);
    CHECK(s.test == s2.test);

    CHECK_THROWS_AS(make_splits(9, 1), DataError);
}

TEST_CASE("dataset generation writes a loadable split tree with a manifest") {
    const fs::path root = fs::temp_directory_path() / "dc2f_dataset_test";
    fs::remove_all(root);
    auto entries = generate_dataset(root.string(), 12, 16, 3);
    CHECK(entries.size() == 12);

    auto train_ids = list_split_ids(root.string(), "train");
    auto val_ids = list_split_ids(root.string(), "val");
    auto test_ids = list_split_ids(root.string(), "test");
    CHECK(train_ids.size() == 9);  // floor(0.8*12) = 9
    CHECK(val_ids.size() == 1);
    CHECK(test_ids.size() == 2);

    VolumePair p = load_pair(root.string(), "train", train_ids[0]);
    CHECK(p.mri.dims[0] == 16);

    std::ifstream manifest(root / "manifest.csv");
    std::string header;
    std::getline(manifest, header);
    CHECK(header == "id,split,seed");
    std::size_t rows = 0;
    for (std::string line; std::getline(manifest, line);) rows += !line.empty();
    CHECK(rows == 12);
    fs::remove_all(root);
}

TEST_CASE("dataset generation is byte-deterministic across runs") {
    const fs::path r1 = fs::temp_directory_path() / "dc2f_ds_a";
    const fs::path r2 = fs::temp_directory_path() / "dc2f_ds_b";
    fs::remove_all(r1);
    fs::remove_all(r2);
    generate_dataset(r1.string(), 10, 16, 7);
    generate_dataset(r2.string(), 10, 16, 7);
    for (const auto& entry : fs::recursive_directory_iterator(r1)) {
        if (!entry.is_regular_file()) continue;
        const fs::path rel = fs::relative(entry.path(), r1);
        std::ifstream f1(entry.path(), std::ios::binary), f2(r2 / rel, std::ios::binary);
        REQUIRE(f2.good());
        std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        CHECK(b1 == b2);
    }
    fs::remove_all(r1);
    fs::remove_all(r2);
}
