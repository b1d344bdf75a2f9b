#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <string>
#include <vector>

#include "splab/checkpoint.hpp"
#include "splab/datasets.hpp"
#include "splab/errors.hpp"
#include "splab/harness.hpp"

namespace py = pybind11;
using namespace splab;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  FloatArray out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<Conditioning> to_conditioning(const std::vector<int>& labels) {
  std::vector<Conditioning> c;
  c.reserve(labels.size());
  for (int l : labels) c.push_back(l < 0 ? Conditioning::null() : Conditioning::of(l));
  return c;
}

ExperimentConfig config_from(const std::string& text, const py::dict& overrides) {
  ExperimentConfig cfg = parse_config_text(text);
  for (const auto& [k, v] : overrides) set_config_value(cfg, py::str(k), py::str(v));
  cfg.validate();
  return cfg;
}

py::dict metrics_dict(const MetricReport& m) {
  py::dict d;
  d["energy_distance"] = m.energy_distance;
  d["mmd_rbf"] = m.mmd_rbf;
  d["nn_recall"] = m.nearest_neighbor_recall;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "splab: self-perceptual diffusion lab";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);

  py::class_<NoiseSchedule>(m, "NoiseSchedule")
      .def_static("zero_terminal_snr", &NoiseSchedule::zero_terminal_snr, py::arg("timesteps") = 1000,
                  py::arg("beta_start") = 0.00085, py::arg("beta_end") = 0.012)
      .def_property_readonly("timesteps", &NoiseSchedule::timesteps)
      .def("alpha_bar", &NoiseSchedule::alpha_bar, py::arg("t"))
      .def("snr", &NoiseSchedule::snr, py::arg("t"))
      .def("alpha_bar_table", [](const NoiseSchedule& s) {
        const auto t = s.alpha_bar_table();
        py::array_t<double> out(static_cast<py::ssize_t>(t.size()));
        std::copy(t.begin(), t.end(), out.mutable_data());
        return out;
      });

  m.def("forward_diffuse", [](const FloatArray& x0, const FloatArray& eps, std::vector<int> t, const NoiseSchedule& s) {
    return to_numpy(forward_diffuse(to_tensor(x0), to_tensor(eps), t, s));
  }, py::arg("x0"), py::arg("eps"), py::arg("t"), py::arg("schedule"));
  m.def("v_target", [](const FloatArray& x0, const FloatArray& eps, std::vector<int> t, const NoiseSchedule& s) {
    return to_numpy(v_target(to_tensor(x0), to_tensor(eps), t, s));
  }, py::arg("x0"), py::arg("eps"), py::arg("t"), py::arg("schedule"));
  m.def("v_to_x0", [](const FloatArray& v, const FloatArray& x_t, std::vector<int> t, const NoiseSchedule& s) {
    return to_numpy(v_to_x0(to_tensor(v), to_tensor(x_t), t, s));
  }, py::arg("v"), py::arg("x_t"), py::arg("t"), py::arg("schedule"));
  m.def("v_to_eps", [](const FloatArray& v, const FloatArray& x_t, std::vector<int> t, const NoiseSchedule& s) {
    return to_numpy(v_to_eps(to_tensor(v), to_tensor(x_t), t, s));
  }, py::arg("v"), py::arg("x_t"), py::arg("t"), py::arg("schedule"));

  m.def("timestep_grid", &make_timestep_grid, py::arg("steps"), py::arg("timesteps") = 1000);
  m.def("ddim_step", [](const FloatArray& x_t, const FloatArray& v, int t, int t_next, const NoiseSchedule& s) {
    return to_numpy(ddim_step(to_tensor(x_t), to_tensor(v), t, t_next, s));
  }, py::arg("x_t"), py::arg("v"), py::arg("t"), py::arg("t_next"), py::arg("schedule"));
  m.def("cfg_combine", [](const FloatArray& vc, const FloatArray& vu, double w) {
    return to_numpy(cfg_combine(to_tensor(vc), to_tensor(vu), w));
  }, py::arg("v_cond"), py::arg("v_uncond"), py::arg("w"));
  m.def("cfg_rescale", [](const FloatArray& vg, const FloatArray& vc, double phi) {
    return to_numpy(cfg_rescale(to_tensor(vg), to_tensor(vc), phi));
  }, py::arg("v_guided"), py::arg("v_cond"), py::arg("phi"));

  m.def("generate_dataset", [](const std::string& name, const std::map<std::string, double>& params,
                               std::uint64_t seed) {
    Rng rng(seed);
    const FiniteDataset d = generate_dataset(name, params, rng);
    return py::make_tuple(to_numpy(d.points), d.labels);
  }, py::arg("name"), py::arg("params") = std::map<std::string, double>{}, py::arg("seed") = 0,
        "Returns (points, labels).");
  m.def("posterior_optimal_v", [](const FloatArray& x_t, int t, const FloatArray& points, const NoiseSchedule& s) {
    FiniteDataset d;
    d.points = to_tensor(points);
    return to_numpy(posterior_optimal_v(to_tensor(x_t), t, d, s));
  }, py::arg("x_t"), py::arg("t"), py::arg("points"), py::arg("schedule"));
  m.def("mse_midpoint", [](const std::vector<FloatArray>& samples) {
    std::vector<Tensor> ts;
    for (const auto& a : samples) ts.push_back(to_tensor(a));
    return to_numpy(mse_midpoint(ts));
  }, py::arg("samples"));
  m.def("energy_distance", [](const FloatArray& a, const FloatArray& b) {
    return energy_distance(to_tensor(a), to_tensor(b));
  }, py::arg("a"), py::arg("b"));
  m.def("mmd_rbf", [](const FloatArray& a, const FloatArray& b, double bandwidth) {
    return mmd_rbf(to_tensor(a), to_tensor(b), bandwidth);
  }, py::arg("a"), py::arg("b"), py::arg("bandwidth") = 0.0);
  m.def("compute_metrics", [](const FloatArray& ref, const FloatArray& gen) {
    return metrics_dict(compute_metrics(to_tensor(ref), to_tensor(gen)));
  }, py::arg("reference"), py::arg("generated"));

  m.def("config_hash", [](const std::string& text, const py::dict& overrides) {
    return config_hash(config_from(text, overrides));
  }, py::arg("text") = "", py::arg("overrides") = py::dict());
  m.def("canonical_config", [](const std::string& text, const py::dict& overrides) {
    return canonical_config(config_from(text, overrides));
  }, py::arg("text") = "", py::arg("overrides") = py::dict());

  py::class_<DenoiserModel>(m, "Model")
      .def_property_readonly("kind", [](const DenoiserModel& d) { return to_string(d.kind()); })
      .def_property_readonly("num_classes", &DenoiserModel::num_classes)
      .def("forward", [](const DenoiserModel& d, const FloatArray& x_t, std::vector<int> t,
                         const std::vector<int>& labels) {
        return to_numpy(d.forward(to_tensor(x_t), t, to_conditioning(labels)));
      }, py::arg("x_t"), py::arg("t"), py::arg("labels"), "Labels below zero select the null class.")
      .def("sample", [](const DenoiserModel& d, const std::vector<int>& labels, int steps, double cfg_scale,
                        double rescale_phi, std::uint64_t seed, int timesteps) {
        SamplerConfig sc;
        sc.steps = steps;
        sc.cfg_scale = cfg_scale;
        sc.rescale_phi = rescale_phi;
        const NoiseSchedule s = NoiseSchedule::zero_terminal_snr(timesteps);
        Rng rng(seed);
        const auto c = to_conditioning(labels);
        return to_numpy(sample(d, c, sc, s, rng).sample);
      }, py::arg("labels"), py::arg("steps") = 25, py::arg("cfg_scale") = 1.0, py::arg("rescale_phi") = 0.0,
           py::arg("seed") = 0, py::arg("timesteps") = 1000);
  m.def("load_model", [](const std::filesystem::path& p) { return splab::load_model(p); }, py::arg("path"));

  py::class_<Experiment>(m, "Experiment")
      .def(py::init([](const std::string& text, const py::dict& overrides) {
             return std::make_unique<Experiment>(config_from(text, overrides));
           }),
           py::arg("text") = "", py::arg("overrides") = py::dict(),
           "Config as `key = value` text plus overrides (values converted with str()).")
      .def_property_readonly("hash", &Experiment::hash)
      .def_property_readonly("run_dir", &Experiment::run_dir)
      .def("train_mse", [](Experiment& e) { return e.ensure_mse().losses; })
      .def("train_sp", [](Experiment& e) { return e.ensure_sp().losses; })
      .def("load_model", &Experiment::load_model, py::arg("which"))
      .def("evaluate", [](Experiment& e) {
        py::list rows;
        for (const auto& r : e.evaluate_all()) {
          py::dict d = metrics_dict(r.result.metrics);
          d["model"] = r.model;
          d["config_hash"] = r.config_hash;
          d["nfe"] = r.result.nfe_per_sample;
          rows.append(d);
        }
        return rows;
      });
}
