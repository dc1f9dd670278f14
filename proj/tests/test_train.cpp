#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dc2fusion/train.hpp"

using namespace dc2f;
namespace fs = std::filesystem;

namespace {

std::vector<TrainSample> tiny_dataset(std::size_t count, std::uint32_t size = 16) {
    std::vector<TrainSample> samples;
    for (std::size_t i = 0; i < count; ++i) {
        PhantomSpec spec;
        spec.seed = 100 + i;
        spec.size = size;
        samples.push_back({"s" + std::to_string(i), generate_phantom_pair(spec)});
    }
    return samples;
}

std::string file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<NamedParam<float>> scalar_params(std::vector<float> values) {
    std::vector<NamedParam<float>> params;
    for (std::size_t i = 0; i < values.size(); ++i)
        params.push_back({"p" + std::to_string(i), Tensor<float>::from({1}, {values[i]}, true)});
    return params;
}

}  // namespace

TEST_CASE("adam: zero gradients leave fresh parameters unchanged, step still counts") {
    auto params = scalar_params({1.5f, -2.0f});
    AdamState<float> st;
    st.init(params);
    for (auto& p : params) p.tensor.grad_buffer();  // allocated, all zero
    adam_step(params, st);
    CHECK(st.step == 1);
    CHECK(params[0].tensor.item() == 1.5f);
    CHECK(params[1].tensor.item() == -2.0f);
}

TEST_CASE("adam: first update with unit gradient has magnitude ~lr") {
    auto params = scalar_params({0.0f});
    AdamState<float> st;
    st.init(params);
    params[0].tensor.grad_buffer()[0] = 1.0f;
    adam_step(params, st);
    // bias-corrected m_hat/sqrt(v_hat) = 1 on the first step
    const double expected = 1e-4 / (1.0 + 1e-8);
    CHECK(std::abs(params[0].tensor.item() + expected) < 1e-10);
}

TEST_CASE("adam rejects non-finite gradients naming the parameter") {
    auto params = scalar_params({0.0f});
    AdamState<float> st;
    st.init(params);
    params[0].tensor.grad_buffer()[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_WITH_AS(adam_step(params, st), doctest::Contains("p0"), NumericError);
}

TEST_CASE("training is bit-deterministic given (seed, config, dataset)") {
    const fs::path dir = fs::temp_directory_path() / "dc2f_train_det";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto samples = tiny_dataset(2);

    auto run = [&](const std::string& name) {
        FusionModel<float> model(toy_config(), 7);
        TrainRunConfig cfg;
        cfg.epochs = 3;
        cfg.seed = 7;
        cfg.out_checkpoint = (dir / name).string();
        cfg.log_path = (dir / (name + ".csv")).string();
        train(model, samples, cfg);
        return file_bytes(cfg.out_checkpoint);
    };
    const std::string a = run("a.dcf");
    const std::string b = run("b.dcf");
    CHECK_FALSE(a.empty());
    CHECK(a == b);
    fs::remove_all(dir);
}

TEST_CASE("loss log has exactly epochs x samples rows") {
    const fs::path dir = fs::temp_directory_path() / "dc2f_train_log";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto samples = tiny_dataset(3);
    FusionModel<float> model(toy_config(), 1);
    TrainRunConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 1;
    cfg.out_checkpoint = (dir / "m.dcf").string();
    cfg.log_path = (dir / "loss.csv").string();
    TrainResult res = train(model, samples, cfg);
    CHECK(res.steps_run == 6);

    std::ifstream log(cfg.log_path);
    std::string header;
    std::getline(log, header);
    CHECK(header == "step,epoch,sample,ssim_mri,ssim_pet,ncc_mri,ncc_pet,l1_mri,l1_pet,pair,total");
    std::size_t rows = 0;
    for (std::string line; std::getline(log, line);) rows += !line.empty();
    CHECK(rows == 6);
    fs::remove_all(dir);
}

TEST_CASE("resume from checkpoint reproduces the uninterrupted run bit-exactly") {
    const fs::path dir = fs::temp_directory_path() / "dc2f_train_resume";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto samples = tiny_dataset(2);

    // uninterrupted: 4 epochs
    FusionModel<float> full(toy_config(), 11);
    TrainRunConfig cfg;
    cfg.seed = 11;
    cfg.epochs = 4;
    cfg.out_checkpoint = (dir / "full.dcf").string();
    train(full, samples, cfg);

    // interrupted: 2 epochs, then resume to 4
    FusionModel<float> half(toy_config(), 11);
    TrainRunConfig cfg_half = cfg;
    cfg_half.epochs = 2;
    cfg_half.out_checkpoint = (dir / "part.dcf").string();
    train(half, samples, cfg_half);

    FusionModel<float> resumed = FusionModel<float>::load(cfg_half.out_checkpoint);
    TrainRunConfig cfg_rest = cfg;
    cfg_rest.epochs = 4;
    cfg_rest.out_checkpoint = cfg_half.out_checkpoint;
    cfg_rest.resume = true;
    train(resumed, samples, cfg_rest);

    CHECK(file_bytes(cfg.out_checkpoint) == file_bytes(cfg_half.out_checkpoint));
    fs::remove_all(dir);
}

TEST_CASE("ten adam steps on the same seed/data are bit-identical across runs") {
    auto samples = tiny_dataset(1);
    auto run = [&]() {
        FusionModel<float> model(toy_config(), 3);
        AdamState<float> optim;
        optim.init(model.params().items());
        for (int i = 0; i < 10; ++i) {
            Tensor<float> mri = volume_to_tensor<float>(samples[0].pair.mri);
            Tensor<float> pet = volume_to_tensor<float>(samples[0].pair.pet);
            Tape<float> tape;
            {
                TapeScope<float> scope(tape);
                tape.backward(total_loss(model.forward(mri, pet), mri, pet).total);
            }
            adam_step(model.params().items(), optim);
            model.params().zero_grad();
        }
        std::vector<float> flat;
        for (const auto& p : model.params().items())
            flat.insert(flat.end(), p.tensor.values().begin(), p.tensor.values().end());
        return flat;
    };
    CHECK(run() == run());
}

TEST_CASE("validate is pure: identical results, untouched parameters and gradients") {
    auto samples = tiny_dataset(2);
    FusionModel<float> model(toy_config(), 13);

    auto checksum = [&] {
        double acc = 0;
        for (const auto& p : model.params().items()) {
            for (float v : p.tensor.values()) acc += static_cast<double>(v);
            CHECK(p.tensor.grad_data() == nullptr);
        }
        return acc;
    };
    const double before = checksum();
    ValidationSummary v1 = validate(model, samples);
    ValidationSummary v2 = validate(model, samples);
    CHECK(before == checksum());
    CHECK(v1.total == v2.total);
    CHECK(v1.ssim_mri == v2.ssim_mri);
    REQUIRE(v1.reports.size() == 2);

    // aggregate equals the hand average of per-sample loss rows
    double hand = 0;
    for (const auto& s : samples) {
        Tensor<float> mri = volume_to_tensor<float>(s.pair.mri);
        Tensor<float> pet = volume_to_tensor<float>(s.pair.pet);
        hand += static_cast<double>(total_loss(model.forward(mri, pet), mri, pet).total.item());
    }
    CHECK(v1.total == doctest::Approx(hand / 2).epsilon(1e-9));

    CHECK_THROWS_AS(validate(model, {}), DataError);
}

TEST_CASE("optimizer sidecar round trip preserves every moment bit") {
    const fs::path dir = fs::temp_directory_path() / "dc2f_opt_rt";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto params = scalar_params({0.5f, -0.25f, 4.0f});
    AdamState<float> st;
    st.init(params);
    Rng rng(5);
    for (auto& m : st.m)
        for (auto& x : m) x = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : st.v)
        for (auto& x : v) x = static_cast<float>(rng.uniform(0, 1));
    st.step = 1234;

    const std::string path = (dir / "o.opt").string();
    save_optim_state(path, st, 9);
    AdamState<float> back;
    CHECK(load_optim_state(path, back) == 9);
    CHECK(back.step == st.step);
    CHECK(back.m == st.m);
    CHECK(back.v == st.v);
    fs::remove_all(dir);
}

TEST_CASE("training config validation") {
    TrainRunConfig cfg;
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), DataError);
    FusionModel<float> model(toy_config(), 1);
    TrainRunConfig ok;
    CHECK_THROWS_AS(train(model, {}, ok), DataError);
}
