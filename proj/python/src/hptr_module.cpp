// SPDX-License-Identifier: Apache-2.0
//
// Python bindings. Poses are (x, y, theta) tuples or [N, 3] arrays; scenarios
// cross the boundary as JSON text or as opaque Scenario objects.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "hptr/error.hpp"
#include "hptr/runtime.hpp"
#include "hptr/training.hpp"

namespace py = pybind11;
using namespace hptr;

namespace {

using PoseTuple = std::tuple<double, double, double>;
using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Pose2 to_pose(const PoseTuple& t) { return {std::get<0>(t), std::get<1>(t), std::get<2>(t)}; }

std::vector<Pose2> to_poses(const Array& a) {
  if (a.ndim() != 2 || a.shape(1) != 3) throw DimensionError("poses must have shape [N, 3]");
  auto r = a.unchecked<2>();
  std::vector<Pose2> out;
  for (py::ssize_t i = 0; i < r.shape(0); ++i) out.emplace_back(r(i, 0), r(i, 1), r(i, 2));
  return out;
}

Array to_array(std::span<const double> v, std::vector<py::ssize_t> shape) {
  Array out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

ModelConfig preset(const std::string& name) {
  if (name == "tiny") return ModelConfig::tiny();
  if (name == "bench") return ModelConfig::bench();
  if (name == "default") return ModelConfig{};
  throw ParseError("unknown preset '" + name + "' (tiny, bench, default)");
}

py::dict output_dict(const ModelOutput<double>& out, double temperature) {
  const auto pred = predictions_to_global(to_prediction_set(out, temperature));
  const auto n = static_cast<py::ssize_t>(out.conf_logits.dim(0));
  const auto m = static_cast<py::ssize_t>(out.conf_logits.dim(1));
  const auto tf = static_cast<py::ssize_t>(out.traj.dim(2));
  std::vector<double> conf, global;
  for (const auto& a : pred.agents) {
    conf.insert(conf.end(), a.confidences.begin(), a.confidences.end());
    for (const auto& mode : a.modes) {
      for (const auto& s : mode.steps) global.insert(global.end(), s.begin(), s.end());
    }
  }
  py::dict d;
  d["agent_id"] = out.target_id;
  d["agent_index"] = out.target_index;
  d["confidence"] = to_array(conf, {n, m});
  d["traj_local"] = to_array(out.traj.data(), {n, m, tf, kTrajChannels});
  d["traj_global"] = to_array(global, {n, m, tf, kTrajChannels});
  return d;
}

class PyModel {
 public:
  PyModel(const std::string& preset_name, const std::string& topology, std::uint64_t seed, int t_f)
      : model_(make_config(preset(preset_name), topology, t_f), seed) {}
  PyModel(const ModelConfig& cfg, const std::filesystem::path& weights)
      : model_(cfg, load_weights<double>(weights)) {}

  static ModelConfig make_config(ModelConfig cfg, const std::string& topology, int t_f) {
    cfg.topology = parse_topology(topology);
    if (t_f > 0) cfg.t_f = t_f;
    return cfg;
  }

  py::dict predict(const Scenario& s, double temperature) const {
    NoGradGuard ng;
    return output_dict(model_.forward(s), temperature);
  }

  double loss(const Scenario& s) const {
    NoGradGuard ng;
    return total_loss(model_.forward(s), s).report.total;
  }

  py::dict evaluate_scenario(const Scenario& s) const {
    NoGradGuard ng;
    const auto r = evaluate(to_prediction_set(model_.forward(s)), s);
    py::dict d;
    d["min_ade"] = r.min_ade;
    d["min_fde"] = r.min_fde;
    d["miss_rate"] = r.miss_rate;
    d["agents"] = r.agents.size();
    return d;
  }

  std::uint64_t flops(const Scenario& s) const {
    return analytic_forward_flops(model_.config(), count_scene(s));
  }

  py::dict gradcheck(const Scenario& s, double h, double tol, double floor) {
    const auto r = loss_gradcheck(model_, s, h, tol, floor);
    py::dict d;
    d["passed"] = r.passed;
    d["max_rel_error"] = r.max_rel_error;
    d["checked_elements"] = r.checked_elements;
    return d;
  }

  void save(const std::filesystem::path& p) const { save_weights(p, model_.weights()); }
  std::vector<std::string> weight_names() const { return model_.weights().names(); }
  std::string config_json() const { return model_config_to_json(model_.config()); }
  const HptrModel<double>& model() const { return model_; }

 private:
  HptrModel<double> model_;
};

class PySession {
 public:
  PySession(const PyModel& model, const Scenario& s) : session_(model.model(), s.map) {}

  py::dict step(const Scenario& frame, double temperature) {
    auto r = session_.step(frame);
    auto d = output_dict(r.output, temperature);
    d["stages"] = r.trace.stages();
    d["latency_us"] = r.trace.latency_us;
    return d;
  }

 private:
  Session<double> session_;
};

}  // namespace

PYBIND11_MODULE(_hptr, m) {
  m.doc() = "Hierarchical pairwise-relative trajectory prediction";

  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<CapacityError>(m, "CapacityError", PyExc_ValueError);
  py::register_exception<CorruptionError>(m, "CorruptionError", PyExc_IOError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ArithmeticError);
  py::register_exception<EmptyGroupError>(m, "EmptyGroupError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("wrap_angle", &wrap_angle, py::arg("theta"));
  m.def(
      "relative_pose",
      [](const PoseTuple& i, const PoseTuple& j) {
        const auto r = relative_pose(to_pose(i), to_pose(j));
        return PoseTuple{r.dx, r.dy, r.dtheta};
      },
      py::arg("origin"), py::arg("target"), "Pose of `target` in the frame of `origin`.");
  m.def(
      "knn_indices",
      [](const Array& q, const Array& t, std::size_t k, std::optional<std::vector<bool>> valid) {
        const auto qp = to_poses(q), tp = to_poses(t);
        Mask mask(tp.size(), 1);
        if (valid) {
          if (valid->size() != tp.size()) throw DimensionError("one validity flag per target");
          for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (*valid)[i];
        }
        const auto nb = knn_indices(qp, tp, mask, k);
        py::array_t<std::int64_t> idx({nb.rows(), nb.cols()});
        std::copy(nb.idx.data.begin(), nb.idx.data.end(), idx.mutable_data());
        py::array_t<bool> ok({nb.rows(), nb.cols()});
        std::copy(nb.valid.begin(), nb.valid.end(), ok.mutable_data());
        return py::make_tuple(idx, ok);
      },
      py::arg("queries"), py::arg("targets"), py::arg("k"), py::arg("valid") = py::none(),
      "Indices [Q, k] of the k nearest valid targets and a validity mask for each slot.");
  m.def(
      "rpe",
      [](const PoseTuple& i, const PoseTuple& j, int dim, double omega, int sign) {
        EncodingConfig c{dim, omega, sign};
        c.validate();
        const auto v = rpe(relative_pose(to_pose(i), to_pose(j)), c);
        return to_array(v, {static_cast<py::ssize_t>(v.size())});
      },
      py::arg("origin"), py::arg("target"), py::arg("dim") = 256, py::arg("omega") = 1000.0,
      py::arg("sign") = 1);
  m.def(
      "softmax_temperature",
      [](const std::vector<double>& logits, double tau) { return softmax_temperature(logits, tau); },
      py::arg("logits"), py::arg("tau") = 0.5);
  m.def("huber", &huber, py::arg("residual"), py::arg("delta") = 1.0);
  m.def("cos_loss", &cos_loss, py::arg("pred_theta"), py::arg("gt_theta"));

  py::class_<Scenario>(m, "Scenario")
      .def_static("from_json", &scenario_from_json, py::arg("text"))
      .def_static("load", &load_scenario, py::arg("path"))
      .def("to_json", &scenario_to_json)
      .def("save", [](const Scenario& s, const std::filesystem::path& p) { save_scenario(p, s); })
      .def_property_readonly("id", [](const Scenario& s) { return s.meta.id; })
      .def_property_readonly("t_f", [](const Scenario& s) { return s.meta.t_f; })
      .def_property_readonly("n_map", [](const Scenario& s) { return s.map.size(); })
      .def_property_readonly("n_lights", [](const Scenario& s) { return s.lights.size(); })
      .def_property_readonly("n_agents", [](const Scenario& s) { return s.agents.size(); })
      .def_property_readonly("targets", &Scenario::target_indices)
      .def("set_light_state",
           [](Scenario& s, std::size_t i, int state) { s.lights.at(i).state = state; })
      .def("__repr__", [](const Scenario& s) {
        return "<Scenario '" + s.meta.id + "' map=" + std::to_string(s.map.size()) +
               " lights=" + std::to_string(s.lights.size()) +
               " agents=" + std::to_string(s.agents.size()) + ">";
      });

  m.def(
      "generate_scenario",
      [](std::uint64_t seed, std::size_t n_lanes, std::size_t n_agents, std::size_t n_lights, int t_f,
         double extent, double target_fraction, bool turning_agents) {
        SynthConfig c;
        c.seed = seed;
        c.n_lanes = n_lanes;
        c.n_agents = n_agents;
        c.n_lights = n_lights;
        c.t_f = t_f;
        c.extent = extent;
        c.target_fraction = target_fraction;
        c.turning_agents = turning_agents;
        return generate_synthetic(c);
      },
      py::arg("seed") = 0, py::arg("n_lanes") = 32, py::arg("n_agents") = 8, py::arg("n_lights") = 4,
      py::arg("t_f") = 80, py::arg("extent") = 120.0, py::arg("target_fraction") = 0.5,
      py::arg("turning_agents") = true);

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&, const std::string&, std::uint64_t, int>(),
           py::arg("preset") = "tiny", py::arg("topology") = "lower_tri", py::arg("seed") = 0,
           py::arg("t_f") = 0, "Freshly initialized 64-bit model; t_f = 0 keeps the preset's horizon.")
      .def_static(
          "load",
          [](const std::string& config_json, const std::filesystem::path& weights) {
            return PyModel(model_config_from_json(config_json), weights);
          },
          py::arg("config_json"), py::arg("weights"))
      .def("predict", &PyModel::predict, py::arg("scenario"), py::arg("temperature") = 1.0)
      .def("loss", &PyModel::loss, py::arg("scenario"))
      .def("evaluate", &PyModel::evaluate_scenario, py::arg("scenario"))
      .def("analytic_flops", &PyModel::flops, py::arg("scenario"))
      .def("gradcheck", &PyModel::gradcheck, py::arg("scenario"), py::arg("h") = 1e-5,
           py::arg("tol") = 1e-4, py::arg("floor") = 1e-3)
      .def("save_weights", &PyModel::save, py::arg("path"))
      .def_property_readonly("weight_names", &PyModel::weight_names)
      .def_property_readonly("config_json", &PyModel::config_json);

  py::class_<PySession>(m, "Session")
      .def(py::init<const PyModel&, const Scenario&>(), py::arg("model"), py::arg("scenario"),
           py::keep_alive<1, 2>(), "Caches the map stage of `scenario`.")
      .def("step", &PySession::step, py::arg("frame"), py::arg("temperature") = 1.0);

  m.def(
      "toy_train",
      [](int epochs, std::size_t scenarios) {
        auto tc = toy_train_config();
        tc.epochs = epochs;
        TrainResult<double> r;
        {
          py::gil_scoped_release release;
          r = toy_train<double>(toy_scenarios(scenarios), toy_model_config(), tc);
        }
        std::vector<py::dict> rows;
        for (const auto& e : r.curve) {
          py::dict d;
          d["epoch"] = e.epoch;
          d["total"] = e.total;
          d["min_ade"] = e.min_ade;
          rows.push_back(d);
        }
        return rows;
      },
      py::arg("epochs") = 20, py::arg("scenarios") = 8);
}
