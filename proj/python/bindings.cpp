// Python bindings for the main operations: phantom generation, VOL3 i/o,
// fusion inference, training, losses, metrics, and the verification suite.
// Volumes cross the boundary as float32 numpy arrays indexed [x, y, z].

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dc2fusion/dataset.hpp"
#include "dc2fusion/selfcheck.hpp"
#include "dc2fusion/train.hpp"

namespace py = pybind11;
using namespace dc2f;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Volume volume_from_array(const FloatArray& arr) {
    if (arr.ndim() != 3) throw ShapeError("expected a 3D array [X,Y,Z]");
    Volume v;
    v.dims = {static_cast<std::uint32_t>(arr.shape(0)), static_cast<std::uint32_t>(arr.shape(1)),
              static_cast<std::uint32_t>(arr.shape(2))};
    v.voxels.resize(v.size());
    auto a = arr.unchecked<3>();
    for (std::size_t z = 0; z < v.dims[2]; ++z)
        for (std::size_t y = 0; y < v.dims[1]; ++y)
            for (std::size_t x = 0; x < v.dims[0]; ++x)
                v.at(x, y, z) = a(static_cast<py::ssize_t>(x), static_cast<py::ssize_t>(y),
                                  static_cast<py::ssize_t>(z));
    return v;
}

py::array_t<float> array_from_volume(const Volume& v) {
    py::array_t<float> arr({static_cast<py::ssize_t>(v.dims[0]), static_cast<py::ssize_t>(v.dims[1]),
                            static_cast<py::ssize_t>(v.dims[2])});
    auto a = arr.mutable_unchecked<3>();
    for (std::size_t z = 0; z < v.dims[2]; ++z)
        for (std::size_t y = 0; y < v.dims[1]; ++y)
            for (std::size_t x = 0; x < v.dims[0]; ++x)
                a(static_cast<py::ssize_t>(x), static_cast<py::ssize_t>(y), static_cast<py::ssize_t>(z)) =
                    v.at(x, y, z);
    return arr;
}

ImageBuf image_from_array(const FloatArray& arr) {
    if (arr.ndim() != 2 && arr.ndim() != 3) throw ShapeError("expected a 2D or 3D array");
    ImageBuf img;
    for (py::ssize_t d = 0; d < arr.ndim(); ++d) img.dims.push_back(static_cast<std::size_t>(arr.shape(d)));
    img.data.resize(img.size());
    const float* p = arr.data();
    // numpy C-order is z-fastest; ImageBuf is x-fastest
    if (arr.ndim() == 2) {
        const std::size_t X = img.dims[0], Y = img.dims[1];
        for (std::size_t x = 0; x < X; ++x)
            for (std::size_t y = 0; y < Y; ++y) img.data[x + X * y] = p[x * Y + y];
    } else {
        const std::size_t X = img.dims[0], Y = img.dims[1], Z = img.dims[2];
        for (std::size_t x = 0; x < X; ++x)
            for (std::size_t y = 0; y < Y; ++y)
                for (std::size_t z = 0; z < Z; ++z) img.data[x + X * (y + Y * z)] = p[(x * Y + y) * Z + z];
    }
    return img;
}

ModelConfig config_from_dict(const py::dict& d) {
    ModelConfig cfg;
    for (auto item : d) {
        const std::string key = py::cast<std::string>(item.first);
        if (key == "in_channels")
            cfg.in_channels = py::cast<std::size_t>(item.second);
        else if (key == "patch")
            cfg.patch = py::cast<std::size_t>(item.second);
        else if (key == "base_embed")
            cfg.base_embed = py::cast<std::size_t>(item.second);
        else if (key == "level_channels")
            cfg.level_channels = py::cast<std::vector<std::size_t>>(item.second);
        else if (key == "heads_per_level")
            cfg.heads_per_level = py::cast<std::vector<std::size_t>>(item.second);
        else if (key == "blocks_per_level")
            cfg.blocks_per_level = py::cast<std::size_t>(item.second);
        else if (key == "window") {
            auto w = py::cast<std::vector<std::size_t>>(item.second);
            if (w.size() != 3) throw DataError("window needs three extents");
            cfg.window = {w[0], w[1], w[2]};
        } else if (key == "offset_kernel")
            cfg.offset_kernel = py::cast<std::size_t>(item.second);
        else
            throw DataError("unknown config key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

py::dict config_to_dict(const ModelConfig& cfg) {
    py::dict d;
    d["in_channels"] = cfg.in_channels;
    d["patch"] = cfg.patch;
    d["base_embed"] = cfg.base_embed;
    d["level_channels"] = cfg.level_channels;
    d["heads_per_level"] = cfg.heads_per_level;
    d["blocks_per_level"] = cfg.blocks_per_level;
    d["window"] = std::vector<std::size_t>{cfg.window[0], cfg.window[1], cfg.window[2]};
    d["offset_kernel"] = cfg.offset_kernel;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "3D multimodal image fusion with deformable window cross-attention";

    py::register_exception<ShapeError>(m, "ShapeMismatchError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataFormatError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericFailure", PyExc_ArithmeticError);

    m.def(
        "generate_phantom_pair",
        [](std::uint64_t seed, std::uint32_t size) {
            PhantomSpec spec;
            spec.seed = seed;
            spec.size = size;
            VolumePair p = generate_phantom_pair(spec);
            return py::make_tuple(array_from_volume(p.mri), array_from_volume(p.pet));
        },
        py::arg("seed") = 0, py::arg("size") = 32,
        "Deterministic synthetic (structural, activity) volume pair in [0,1].");

    m.def(
        "save_volume", [](const std::string& path, const FloatArray& arr) { save_volume(path, volume_from_array(arr)); },
        py::arg("path"), py::arg("volume"), "Write a [X,Y,Z] float array as a VOL3 file.");
    m.def(
        "load_volume", [](const std::string& path) { return array_from_volume(load_volume(path)); }, py::arg("path"));

    m.def(
        "psnr", [](const FloatArray& a, const FloatArray& b) { return psnr(image_from_array(a), image_from_array(b)); },
        py::arg("a"), py::arg("b"));
    m.def(
        "ssim",
        [](const FloatArray& a, const FloatArray& b, std::size_t window) {
            return ssim_metric(image_from_array(a), image_from_array(b), window);
        },
        py::arg("a"), py::arg("b"), py::arg("window") = 7);
    m.def(
        "nmi",
        [](const FloatArray& a, const FloatArray& b, std::size_t bins) {
            return nmi(image_from_array(a), image_from_array(b), bins);
        },
        py::arg("a"), py::arg("b"), py::arg("bins") = 64);
    m.def(
        "fmi",
        [](const FloatArray& a, const FloatArray& b, std::size_t bins) {
            return fmi(image_from_array(a), image_from_array(b), bins);
        },
        py::arg("a"), py::arg("b"), py::arg("bins") = 64);

    m.def(
        "evaluate",
        [](const FloatArray& fused, const FloatArray& mri, const FloatArray& pet, const std::string& mode,
           long long slice_index) {
            const EvalMode em = mode == "slice2d" ? EvalMode::Slice2d : EvalMode::Volume3d;
            FusionReport r = evaluate_sample(volume_from_array(fused), volume_from_array(mri),
                                             volume_from_array(pet), em, slice_index);
            py::dict d;
            auto entry = [](const FusionReport::Entry& e) {
                py::dict x;
                x["vs_mri"] = e.vs_mri;
                x["vs_pet"] = e.vs_pet;
                x["mean"] = e.mean;
                return x;
            };
            d["psnr"] = entry(r.psnr);
            d["ssim"] = entry(r.ssim);
            d["nmi"] = entry(r.nmi);
            d["fmi"] = entry(r.fmi);
            d["mode"] = eval_mode_name(r.mode);
            d["slice_index"] = r.slice_index;
            return d;
        },
        py::arg("fused"), py::arg("mri"), py::arg("pet"), py::arg("mode") = "slice2d", py::arg("slice_index") = -1);

    m.def(
        "loss_breakdown",
        [](const FloatArray& fused, const FloatArray& mri, const FloatArray& pet) {
            Tensor<double> f = volume_to_tensor<double>(volume_from_array(fused));
            Tensor<double> a = volume_to_tensor<double>(volume_from_array(mri));
            Tensor<double> b = volume_to_tensor<double>(volume_from_array(pet));
            LossBreakdown<double> lb = total_loss(f, a, b);
            py::dict d;
            d["ssim_mri"] = lb.ssim_mri.item();
            d["ssim_pet"] = lb.ssim_pet.item();
            d["ncc_mri"] = lb.ncc_mri.item();
            d["ncc_pet"] = lb.ncc_pet.item();
            d["l1_mri"] = lb.l1_mri.item();
            d["l1_pet"] = lb.l1_pet.item();
            d["pair"] = lb.pair.item();
            d["total"] = lb.total.item();
            return d;
        },
        py::arg("fused"), py::arg("mri"), py::arg("pet"),
        "Composite training loss components ((1-s) transform applied in 'total').");

    m.def("default_config", [] { return config_to_dict(ModelConfig{}); });
    m.def("toy_config", [] { return config_to_dict(toy_config()); });
    m.def(
        "parameter_count",
        [](const py::dict& cfg) { return FusionModel<float>(config_from_dict(cfg), 0).parameter_count(); },
        py::arg("config"));

    m.def(
        "init_checkpoint",
        [](const std::string& path, std::uint64_t seed, const py::object& cfg) {
            ModelConfig c = cfg.is_none() ? ModelConfig{} : config_from_dict(py::cast<py::dict>(cfg));
            FusionModel<float> model(c, seed);
            model.save(path);
            return model.parameter_count();
        },
        py::arg("path"), py::arg("seed") = 0, py::arg("config") = py::none(),
        "Write a freshly initialized checkpoint; returns the parameter count.");

    m.def(
        "fuse",
        [](const std::string& ckpt, const FloatArray& mri, const FloatArray& pet) {
            FusionModel<float> model = FusionModel<float>::load(ckpt);
            Tensor<float> fused = model.forward(volume_to_tensor<float>(volume_from_array(mri)),
                                                volume_to_tensor<float>(volume_from_array(pet)),
                                                {false, /*clamp_output=*/true});
            return array_from_volume(tensor_to_volume(fused));
        },
        py::arg("checkpoint"), py::arg("mri"), py::arg("pet"));

    m.def(
        "overfit_pair",
        [](const FloatArray& mri, const FloatArray& pet, std::size_t steps, std::uint64_t seed, double lr,
           const py::object& cfg) {
            ModelConfig c = cfg.is_none() ? ModelConfig{} : config_from_dict(py::cast<py::dict>(cfg));
            FusionModel<float> model(c, seed);
            std::vector<TrainSample> samples{{"pair", {volume_from_array(mri), volume_from_array(pet)}}};
            TrainRunConfig run;
            run.epochs = steps;  // one sample: one step per epoch
            run.seed = seed;
            run.lr = lr;
            run.augment = false;
            TrainResult res = train(model, samples, run);
            Tensor<float> fused = model.forward(volume_to_tensor<float>(samples[0].pair.mri),
                                                volume_to_tensor<float>(samples[0].pair.pet), {false, true});
            return py::make_tuple(array_from_volume(tensor_to_volume(fused)), res.step_totals);
        },
        py::arg("mri"), py::arg("pet"), py::arg("steps") = 50, py::arg("seed") = 0, py::arg("lr") = 1e-4,
        py::arg("config") = py::none(),
        "Train a fresh model on one pair; returns (fused volume, per-step totals).");

    m.def(
        "train",
        [](const std::string& data_root, const std::string& out_ckpt, std::size_t epochs, std::uint64_t seed,
           double lr, const py::object& cfg, bool augment) {
            ModelConfig c = cfg.is_none() ? ModelConfig{} : config_from_dict(py::cast<py::dict>(cfg));
            FusionModel<float> model(c, seed);
            std::vector<TrainSample> samples;
            for (const auto& id : list_split_ids(data_root, "train"))
                samples.push_back({id, load_pair(data_root, "train", id)});
            TrainRunConfig run;
            run.epochs = epochs;
            run.seed = seed;
            run.lr = lr;
            run.augment = augment;
            run.out_checkpoint = out_ckpt;
            run.log_path = out_ckpt + ".loss.csv";
            TrainResult res = train(model, samples, run);
            return res.steps_run;
        },
        py::arg("data_root"), py::arg("out_checkpoint"), py::arg("epochs") = 1, py::arg("seed") = 0,
        py::arg("lr") = 1e-4, py::arg("config") = py::none(), py::arg("augment") = true);

    m.def(
        "gen_dataset",
        [](const std::string& root, std::size_t count, std::uint32_t size, std::uint64_t seed) {
            generate_dataset(root, count, size, seed);
        },
        py::arg("root"), py::arg("count") = 20, py::arg("size") = 32, py::arg("seed") = 0);

    m.def(
        "selfcheck",
        [](bool invariants) {
            std::vector<CheckResult> checks = run_gradient_checks();
            if (invariants) {
                auto inv = run_invariant_checks();
                checks.insert(checks.end(), inv.begin(), inv.end());
            }
            py::list out;
            for (const auto& c : checks) out.append(py::make_tuple(c.name, c.pass, c.value, c.tol));
            return out;
        },
        py::arg("invariants") = true, "Run the gradient-check and invariant suites; returns (name, pass, err, tol).");
}
