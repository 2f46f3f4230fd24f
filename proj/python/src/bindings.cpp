#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "latentsub/harness.hpp"
#include "latentsub/image_io.hpp"

namespace py = pybind11;
using namespace latentsub;
using Json = nlohmann::json;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const FloatArray& a)
{
    std::vector<std::int64_t> shape(a.shape(), a.shape() + a.ndim());
    return torch::from_blob(const_cast<float*>(a.data()), shape, torch::kFloat32).clone();
}

py::array_t<float> to_numpy(const torch::Tensor& t)
{
    const auto c = t.to(torch::kFloat32).contiguous();
    py::array_t<float> out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
    std::memcpy(out.mutable_data(), c.data_ptr<float>(), static_cast<std::size_t>(c.numel()) * sizeof(float));
    return out;
}

ImageBatch to_batch(const FloatArray& images, const std::optional<std::vector<std::int64_t>>& labels)
{
    if (images.ndim() != 4)
        throw InvalidArgument("images must be a B x C x H x W array");
    return ImageBatch(to_tensor(images), labels);
}

// JSON crosses the boundary as text so that Python sees plain dicts via the json module.
py::object to_py(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
Json from_py(const py::object& o) { return Json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>()); }

ToyStyle parse_style(const std::string& s)
{
    if (s == "private")
        return ToyStyle::Private;
    if (s == "prior")
        return ToyStyle::Prior;
    throw InvalidArgument("style must be 'private' or 'prior'");
}

py::dict output_dict(const OracleOutput& o)
{
    py::dict d;
    d["label"] = o.label();
    if (o.probs())
        d["probs"] = *o.probs();
    return d;
}

class PyOracle {
public:
    PyOracle(const std::filesystem::path& checkpoint, const std::string& mode, std::optional<std::int64_t> budget)
    {
        OracleConfig oc;
        oc.mode = parse_output_mode(mode);
        oc.budget = budget;
        oracle_ = open_local_oracle(archive_stem(checkpoint), oc);
    }

    py::list query(const FloatArray& images, const std::string& stage)
    {
        const auto out = oracle_->query(to_batch(images, std::nullopt), parse_stage(stage));
        py::list result;
        for (const auto& o : out)
            result.append(output_dict(o));
        return result;
    }

    py::object ledger() const { return to_py(oracle_->snapshot_ledger().to_json()); }
    std::optional<std::int64_t> remaining() const { return oracle_->remaining_budget(); }
    BlackBox& box() { return *oracle_; }

private:
    std::shared_ptr<MeteredOracle> oracle_;
};

} // namespace

PYBIND11_MODULE(_core, m)
{
    m.doc() = "Bindings for the latentsub C++ core";

    py::register_exception<Error>(m, "LatentsubError", PyExc_RuntimeError);
    py::register_exception<BudgetExhausted>(m, "BudgetExhausted", m.attr("LatentsubError").ptr());

    m.def("seed_torch", &seed_torch, py::arg("seed"));
    m.def("derive_seed", &derive_seed, py::arg("seed"), py::arg("a"), py::arg("b") = 0, py::arg("c") = 0);

    m.def("toy_class_names", [](std::int64_t n) { return toy_class_space(n).names(); }, py::arg("num_classes"));
    m.def(
        "toy_dataset",
        [](std::int64_t num_classes, std::int64_t image_size, std::int64_t samples_per_class, std::uint64_t seed,
           const std::string& style) {
            const auto batch = generate_toy_dataset({num_classes, image_size, samples_per_class, seed},
                                                    parse_style(style));
            return py::make_tuple(to_numpy(batch.pixels()), *batch.labels());
        },
        py::arg("num_classes") = 10, py::arg("image_size") = 32, py::arg("samples_per_class") = 100,
        py::arg("seed") = 0, py::arg("style") = "private", "Returns (images B x 3 x H x W, labels).");
    m.def("write_image_grid",
          [](const FloatArray& images, std::int64_t columns, const std::filesystem::path& path) {
              write_image_grid(to_batch(images, std::nullopt), columns, path);
          },
          py::arg("images"), py::arg("columns"), py::arg("path"));

    m.def("default_config", [] { return to_py(default_experiment().to_json()); });
    m.def("load_config", [](const std::filesystem::path& p) { return to_py(load_experiment_config(p).to_json()); },
          py::arg("path"));
    m.def("validate_config", [](const py::object& cfg) { return to_py(ExperimentConfig::from_json(from_py(cfg)).to_json()); },
          py::arg("config"), "Round-trips a config dict through validation and returns the normalized form.");

    m.def(
        "train_target",
        [](const py::object& cfg, const std::filesystem::path& stem, std::uint64_t seed) {
            const auto c = ExperimentConfig::from_json(from_py(cfg));
            Json report;
            {
                py::gil_scoped_release release;
                report = train_target(c.dataset, c.target, seed, stem).to_json();
            }
            return to_py(report);
        },
        py::arg("config"), py::arg("stem"), py::arg("seed") = 0);

    py::class_<PyOracle>(m, "Oracle")
        .def(py::init<const std::filesystem::path&, const std::string&, std::optional<std::int64_t>>(),
             py::arg("checkpoint"), py::arg("mode") = "probability", py::arg("budget") = py::none())
        .def("query", &PyOracle::query, py::arg("images"), py::arg("stage") = "eval")
        .def_property_readonly("ledger", &PyOracle::ledger)
        .def_property_readonly("remaining_budget", &PyOracle::remaining);

    m.def(
        "filter_members",
        [](PyOracle& oracle, const FloatArray& images, std::optional<std::vector<std::int64_t>> labels, double sigma,
           double u, std::uint64_t seed) {
            MembershipConfig mc;
            mc.sigma = sigma;
            mc.u = u;
            mc.mode = oracle.box().mode();
            mc.seed = seed;
            const auto r = filter_members(to_batch(images, labels), oracle.box(), mc);
            py::dict d;
            d["kept"] = r.kept;
            d["distances"] = r.distances;
            d["clean_labels"] = r.clean_labels;
            return d;
        },
        py::arg("oracle"), py::arg("images"), py::arg("labels") = py::none(), py::arg("sigma") = 0.03,
        py::arg("u") = 1e-3, py::arg("seed") = 0);

    m.def(
        "substitute_loss",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& logits,
           std::optional<py::array_t<double, py::array::c_style | py::array::forcecast>> probs,
           std::vector<std::int64_t> labels, const std::string& mode, double lambda1, double lambda2) {
            const auto b = logits.shape(0), n = logits.shape(1);
            const auto lt = torch::from_blob(const_cast<double*>(logits.data()), {b, n}, torch::kFloat64).clone();
            TeacherTargets t;
            t.mode = parse_output_mode(mode);
            t.labels = torch::tensor(labels, torch::kInt64);
            if (probs)
                t.probs = torch::from_blob(const_cast<double*>(probs->data()), {b, n}, torch::kFloat64).clone();
            LossConfig cfg{lambda1, lambda2, false};
            return substitute_loss(lt, t, cfg.for_mode(t.mode)).item<double>();
        },
        py::arg("logits"), py::arg("probs"), py::arg("labels"), py::arg("mode") = "probability",
        py::arg("lambda1") = 1.0, py::arg("lambda2") = 1.0);

    m.def(
        "attack",
        [](const std::filesystem::path& substitute, const FloatArray& images,
           std::optional<std::vector<std::int64_t>> labels, const py::object& attack_cfg) {
            auto net = load_substitute(archive_stem(substitute));
            const auto cfg = AttackConfig::from_json(from_py(attack_cfg));
            const auto advs = attack(*net, to_batch(images, labels), cfg);
            py::dict d;
            d["adversarials"] = to_numpy(advs.adversarials.pixels());
            d["l2"] = advs.l2;
            d["linf"] = advs.linf;
            d["pred_before"] = advs.pred_before;
            d["pred_after"] = advs.pred_after;
            d["fooling_rate"] = fooling_rate(advs);
            return d;
        },
        py::arg("substitute"), py::arg("images"), py::arg("labels") = py::none(), py::arg("config"));

    m.def(
        "sample_plans",
        [](const std::filesystem::path& codebook_dir, std::int64_t class_index, std::int64_t count,
           std::uint64_t seed) {
            const auto book = Codebook::load(codebook_dir);
            Json plans = Json::array();
            for (std::int64_t i = 0; i < count; ++i)
                plans.push_back(lca::sample_plan(book, class_index, derive_seed(seed, i)).to_json());
            return to_py(plans);
        },
        py::arg("codebook_dir"), py::arg("class_index"), py::arg("count"), py::arg("seed") = 0);

    m.def(
        "identity_equivariance",
        [](const FloatArray& images, std::int64_t stride, std::int64_t dy, std::int64_t dx) {
            const auto batch = to_batch(images, std::nullopt);
            IdentityBackend backend(toy_class_space(2), batch.height(), stride);
            const auto r = check_equivariance(backend, batch, dy, dx);
            py::dict d;
            d["exact"] = r.exact;
            d["interior_cosine"] = r.interior_cosine;
            d["max_abs_diff"] = r.max_abs_diff;
            return d;
        },
        py::arg("images"), py::arg("stride") = 2, py::arg("dy") = 2, py::arg("dx") = 0);

    m.def(
        "run_pipeline",
        [](const py::object& cfg, const std::filesystem::path& run_dir) {
            const auto c = ExperimentConfig::from_json(from_py(cfg));
            Json summary;
            {
                py::gil_scoped_release release;
                summary = run_pipeline(c, run_dir).to_json();
            }
            return to_py(summary);
        },
        py::arg("config"), py::arg("run_dir"));

    m.def(
        "run_preset",
        [](const std::string& preset, const py::object& cfg, const std::filesystem::path& dir,
           std::vector<std::uint64_t> seeds, std::vector<std::int64_t> sizes) {
            const auto c = ExperimentConfig::from_json(from_py(cfg));
            Json result;
            {
                py::gil_scoped_release release;
                if (preset == "ablation-lca")
                    result = run_ablation_lca(c, seeds, dir).to_json();
                else if (preset == "codebook-sweep")
                    result = run_codebook_sweep(c, sizes, dir).to_json();
                else if (preset == "label-only")
                    result = run_label_only_parity(c, seeds, dir).to_json();
                else
                    throw InvalidArgument("unknown preset '" + preset + "'");
            }
            return to_py(result);
        },
        py::arg("preset"), py::arg("config"), py::arg("dir"), py::arg("seeds") = std::vector<std::uint64_t>{0, 1, 2},
        py::arg("sizes") = std::vector<std::int64_t>{2, 5, 10, 20});

    m.def("render_report", &render_report, py::arg("dir"));
}
