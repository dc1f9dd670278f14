#pragma once

// Adam training loop over volume pairs: forward, Eq-style composite loss,
// backward, bias-corrected update, tape reset. One sample per step (batch 1).
// Per-epoch RNG streams are derived from (run seed, epoch index), so a resumed
// run replays the exact shuffle and augmentation schedule of an uninterrupted
// one. Model checkpoints use the DCF1 format; optimizer state rides in a DCO1
// sidecar next to the checkpoint so resume is bit-exact.

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "dc2fusion/metrics.hpp"
#include "dc2fusion/model.hpp"
#include "dc2fusion/phantom.hpp"

namespace dc2f {

template <class T>
struct AdamState {
    T lr = static_cast<T>(1e-4);
    T beta1 = static_cast<T>(0.9);
    T beta2 = static_cast<T>(0.999);
    T eps = static_cast<T>(1e-8);
    std::uint64_t step = 0;
    std::vector<std::vector<T>> m, v;  // parallel to the parameter list

    void init(const std::vector<NamedParam<T>>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(p.tensor.numel(), T(0));
            v.emplace_back(p.tensor.numel(), T(0));
        }
    }
    bool matches(const std::vector<NamedParam<T>>& params) const {
        if (m.size() != params.size()) return false;
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m[i].size() != params[i].tensor.numel()) return false;
        return true;
    }
};

// standard bias-corrected Adam; missing gradients count as zero
template <class T>
void adam_step(std::vector<NamedParam<T>>& params, AdamState<T>& state) {
    if (!state.matches(params)) throw NumericError("adam: state does not match parameter list");
    for (const auto& p : params) {
        const T* g = p.tensor.grad_data();
        if (!g) continue;
        for (std::size_t i = 0; i < p.tensor.numel(); ++i)
            if (!std::isfinite(static_cast<double>(g[i])))
                throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
    state.step += 1;
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta1), static_cast<double>(state.step)));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta2), static_cast<double>(state.step)));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<T>& t = params[pi].tensor;
        const T* g = t.grad_data();
        T* m = state.m[pi].data();
        T* v = state.v[pi].data();
        T* w = t.data();
        const std::size_t n = t.numel();
        for (std::size_t i = 0; i < n; ++i) {
            const T gi = g ? g[i] : T(0);
            m[i] = state.beta1 * m[i] + (T(1) - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (T(1) - state.beta2) * gi * gi;
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// optimizer sidecar (DCO1)

template <class T>
void save_optim_state(const std::string& path, const AdamState<T>& state, std::uint64_t next_epoch) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write optimizer state: " + path);
    wire::put_magic(os, "DCO1");
    wire::put_u32(os, 1);
    wire::put_u8(os, sizeof(T) == 4 ? 0 : 1);
    wire::put_u64(os, state.step);
    wire::put_u64(os, next_epoch);
    wire::put_u64(os, state.m.size());
    auto put_val = [&](T x) {
        if constexpr (sizeof(T) == 4)
            wire::put_f32(os, static_cast<float>(x));
        else
            wire::put_f64(os, static_cast<double>(x));
    };
    for (std::size_t i = 0; i < state.m.size(); ++i) {
        wire::put_u64(os, state.m[i].size());
        for (T x : state.m[i]) put_val(x);
        for (T x : state.v[i]) put_val(x);
    }
    if (!os) throw DataError("optimizer state write failed: " + path);
}

template <class T>
std::uint64_t load_optim_state(const std::string& path, AdamState<T>& state) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open optimizer state: " + path);
    wire::expect_magic(is, "DCO1", "optimizer state");
    if (wire::get_u32(is, "optimizer version") != 1) throw DataError("unsupported optimizer state version");
    const std::uint8_t dtype = wire::get_u8(is, "optimizer dtype");
    if (dtype != (sizeof(T) == 4 ? 0 : 1)) throw DataError("optimizer state precision mismatch");
    state.step = wire::get_u64(is, "optimizer step");
    const std::uint64_t next_epoch = wire::get_u64(is, "optimizer epoch");
    const std::uint64_t count = wire::get_u64(is, "optimizer tensor count");
    state.m.assign(count, {});
    state.v.assign(count, {});
    auto get_val = [&]() -> T {
        if constexpr (sizeof(T) == 4)
            return static_cast<T>(wire::get_f32(is, "optimizer payload"));
        else
            return static_cast<T>(wire::get_f64(is, "optimizer payload"));
    };
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t n = wire::get_u64(is, "optimizer tensor size");
        state.m[i].resize(n);
        state.v[i].resize(n);
        for (auto& x : state.m[i]) x = get_val();
        for (auto& x : state.v[i]) x = get_val();
    }
    return next_epoch;
}

// ---------------------------------------------------------------------------

struct TrainRunConfig {
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    std::size_t checkpoint_interval = 1;  // epochs between checkpoints
    std::string out_checkpoint;
    std::string log_path;  // empty: no CSV log
    double lr = 1e-4;
    bool augment = true;
    bool resume = false;
    std::size_t ssim_window = 7;

    void validate() const {
        if (epochs < 1) throw DataError("epochs must be >= 1");
        if (checkpoint_interval < 1) throw DataError("checkpoint interval must be >= 1");
    }
};

struct TrainSample {
    std::string id;
    VolumePair pair;
};

struct TrainResult {
    std::vector<double> step_totals;  // total loss per optimization step, step order
    std::size_t steps_run = 0;
    std::size_t first_epoch = 0;
};

template <class T>
TrainResult train(FusionModel<T>& model, const std::vector<TrainSample>& samples, const TrainRunConfig& cfg,
                  const std::function<void(std::size_t, double)>& epoch_callback = {}) {
    cfg.validate();
    if (samples.empty()) throw DataError("train: empty dataset");

    AdamState<T> optim;
    optim.lr = static_cast<T>(cfg.lr);
    optim.init(model.params().items());
    std::size_t start_epoch = 0;
    if (cfg.resume) {
        start_epoch = static_cast<std::size_t>(load_optim_state(cfg.out_checkpoint + ".opt", optim));
        if (!optim.matches(model.params().items()))
            throw DataError("optimizer state does not match model parameters");
        if (start_epoch >= cfg.epochs) throw DataError("resume: run already complete");
    }

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        const bool append = cfg.resume;
        log.open(cfg.log_path, append ? std::ios::app : std::ios::trunc);
        if (!log) throw DataError("cannot write loss log: " + cfg.log_path);
        if (!append)
            log << "step,epoch,sample,ssim_mri,ssim_pet,ncc_mri,ncc_pet,l1_mri,l1_pet,pair,total\n";
    }

    const Rng run_rng(cfg.seed);
    TrainResult result;
    result.first_epoch = start_epoch;
    std::uint64_t step = optim.step;

    auto checkpoint = [&](std::size_t next_epoch) {
        if (cfg.out_checkpoint.empty()) return;
        model.save(cfg.out_checkpoint);
        save_optim_state(cfg.out_checkpoint + ".opt", optim, next_epoch);
    };

    for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        Rng erng = run_rng.derive(0xE60C000ULL + epoch);
        std::vector<std::size_t> order(samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        erng.shuffle(order);

        double epoch_total = 0;
        for (std::size_t si : order) {
            const TrainSample& s = samples[si];
            VolumePair p = cfg.augment ? augment_rotate(s.pair, erng) : s.pair;
            Tensor<T> mri = volume_to_tensor<T>(p.mri);
            Tensor<T> pet = volume_to_tensor<T>(p.pet);

            Tape<T> tape;
            LossBreakdown<T> lb;
            {
                TapeScope<T> scope(tape);
                Tensor<T> fused = model.forward(mri, pet);
                lb = total_loss(fused, mri, pet, cfg.ssim_window);
                const double total = static_cast<double>(lb.total.item());
                if (!std::isfinite(total))
                    throw NumericError("non-finite loss at step " + std::to_string(step + 1) +
                                       " (last-good checkpoint retained)");
                tape.backward(lb.total);
            }
            adam_step(model.params().items(), optim);
            model.params().zero_grad();
            tape.clear();

            ++step;
            const double total = static_cast<double>(lb.total.item());
            epoch_total += total;
            result.step_totals.push_back(total);
            ++result.steps_run;
            if (log) {
                log << step << ',' << epoch << ',' << s.id << ',' << static_cast<double>(lb.ssim_mri.item()) << ','
                    << static_cast<double>(lb.ssim_pet.item()) << ',' << static_cast<double>(lb.ncc_mri.item()) << ','
                    << static_cast<double>(lb.ncc_pet.item()) << ',' << static_cast<double>(lb.l1_mri.item()) << ','
                    << static_cast<double>(lb.l1_pet.item()) << ',' << static_cast<double>(lb.pair.item()) << ','
                    << total << '\n';
            }
        }
        if (epoch_callback) epoch_callback(epoch, epoch_total / static_cast<double>(samples.size()));
        if ((epoch + 1) % cfg.checkpoint_interval == 0 && epoch + 1 < cfg.epochs) checkpoint(epoch + 1);
    }
    checkpoint(cfg.epochs);
    return result;
}

// ---------------------------------------------------------------------------
// validation: pure, no tape, no parameter mutation

struct ValidationSummary {
    double ssim_mri = 0, ssim_pet = 0, ncc_mri = 0, ncc_pet = 0, l1_mri = 0, l1_pet = 0, pair = 0, total = 0;
    std::vector<FusionReport> reports;
};

template <class T>
ValidationSummary validate(const FusionModel<T>& model, const std::vector<TrainSample>& samples,
                           EvalMode mode = EvalMode::Volume3d, std::size_t ssim_window = 7) {
    if (samples.empty()) throw DataError("validate: empty split");
    ValidationSummary sum;
    for (const auto& s : samples) {
        Tensor<T> mri = volume_to_tensor<T>(s.pair.mri);
        Tensor<T> pet = volume_to_tensor<T>(s.pair.pet);
        Tensor<T> fused = model.forward(mri, pet);  // unclamped for the loss
        LossBreakdown<T> lb = total_loss(fused, mri, pet, ssim_window);
        sum.ssim_mri += static_cast<double>(lb.ssim_mri.item());
        sum.ssim_pet += static_cast<double>(lb.ssim_pet.item());
        sum.ncc_mri += static_cast<double>(lb.ncc_mri.item());
        sum.ncc_pet += static_cast<double>(lb.ncc_pet.item());
        sum.l1_mri += static_cast<double>(lb.l1_mri.item());
        sum.l1_pet += static_cast<double>(lb.l1_pet.item());
        sum.pair += static_cast<double>(lb.pair.item());
        sum.total += static_cast<double>(lb.total.item());

        Volume fused_vol = tensor_to_volume(clamp(fused, T(0), T(1)));
        sum.reports.push_back(evaluate_sample(fused_vol, s.pair.mri, s.pair.pet, mode, -1, s.id));
    }
    const double inv = 1.0 / static_cast<double>(samples.size());
    sum.ssim_mri *= inv;
    sum.ssim_pet *= inv;
    sum.ncc_mri *= inv;
    sum.ncc_pet *= inv;
    sum.l1_mri *= inv;
    sum.l1_pet *= inv;
    sum.pair *= inv;
    sum.total *= inv;
    return sum;
}

}  // namespace dc2f
