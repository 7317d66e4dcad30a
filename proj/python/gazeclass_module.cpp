#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "gazeclass/attribution.hpp"
#include "gazeclass/augment.hpp"
#include "gazeclass/error.hpp"
#include "gazeclass/eval.hpp"
#include "gazeclass/experiment.hpp"
#include "gazeclass/hfm.hpp"
#include "gazeclass/tsne.hpp"

namespace py = pybind11;
using namespace gazeclass;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Grid to_grid(const Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  Grid g(a.shape(1), a.shape(0));
  std::copy_n(a.data(), g.size(), g.values.begin());
  return g;
}

Array from_grid(const Grid& g) {
  Array out({g.height, g.width});
  std::copy(g.values.begin(), g.values.end(), out.mutable_data());
  return out;
}

FeatureMatrix to_features(const Array& a, Stream s) {
  if (a.ndim() != 2) throw ShapeError("expected an (images, dim) array");
  FeatureMatrix m{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)), s, {}};
  m.values.assign(a.data(), a.data() + a.size());
  return m;
}

py::list plan_to_py(const CvPlan& plan) {
  py::list folds;
  for (const auto& f : plan.folds) {
    py::dict d;
    d["train"] = f.train;
    d["test"] = f.test;
    folds.append(d);
  }
  return folds;
}

// Configs cross the boundary as JSON text; the Python side wraps them in dicts.
ExperimentConfig parse_config(const std::string& text) { return config_from_json(nlohmann::json::parse(text)); }

py::dict prediction_to_py(const SubjectPrediction& p) {
  py::dict d;
  d["subject_id"] = p.subject_id;
  d["label"] = group_name(p.label);
  d["n_correct"] = p.n_correct;
  d["classification_score"] = p.classification_score;
  d["mean_p_asd"] = p.mean_p_asd;
  d["correct"] = p.correct();
  return d;
}

}  // namespace

PYBIND11_MODULE(_gazeclass, m) {
  m.doc() = "Gaze-based two-stream classifier: core routines";
  m.attr("__version__") = "0.1.0";

  auto& base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.def(
      "roc_auc",
      [](const std::vector<double>& scores, const std::vector<bool>& positive) {
        const auto r = roc_auc(scores, positive);
        std::vector<std::tuple<double, double, double>> pts;
        for (const auto& p : r.points) pts.emplace_back(p.threshold, p.fpr, p.tpr);
        return py::make_tuple(r.auc, pts);
      },
      py::arg("scores"), py::arg("positive"), "Returns (auc, [(threshold, fpr, tpr), ...]).");

  m.def("loocv_plan", [](const std::vector<std::string>& ids) { return plan_to_py(make_loocv_plan(ids)); },
        py::arg("subject_ids"));
  m.def(
      "kfold_plan",
      [](const std::vector<std::string>& ids, std::size_t k, std::uint64_t seed) {
        return plan_to_py(make_kfold_plan(ids, k, seed));
      },
      py::arg("subject_ids"), py::arg("k"), py::arg("seed") = 1);

  m.def(
      "subject_score",
      [](const std::string& label, const std::vector<std::pair<double, double>>& probs) {
        std::vector<Probabilities> p;
        for (const auto& [td, asd] : probs) p.push_back({td, asd});
        return prediction_to_py(make_prediction("subject", parse_group(label), p));
      },
      py::arg("label"), py::arg("probs"), "Scores ten (p_td, p_asd) pairs for one subject.");

  m.def(
      "ranksum",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        const auto r = ranksum_test(a, b);
        return py::make_tuple(r.u, r.z, r.p);
      },
      py::arg("a"), py::arg("b"), "Returns (U, z, two-sided p).");

  m.def(
      "build_hfm",
      [](const std::vector<std::tuple<double, double, double>>& samples, std::size_t width, std::size_t height,
         double sample_rate_hz, double sigma_px) {
        std::vector<GazeSample> s;
        for (const auto& [t, x, y] : samples) s.push_back({t, x, y});
        return from_grid(build_hfm(s, width, height, {sample_rate_hz, sigma_px}).grid);
      },
      py::arg("samples"), py::arg("width"), py::arg("height"), py::arg("sample_rate_hz") = 300.0,
      py::arg("sigma_px") = 24.0, "Fixation map from (t_ms, x_px, y_px) samples.");

  m.def(
      "augment10",
      [](const Array& grid256) {
        py::list out;
        for (const auto& v : augment10(to_grid(grid256))) out.append(from_grid(v));
        return out;
      },
      py::arg("grid"), "Five 224x224 crops of a 256x256 grid followed by their mirrors.");
  m.def("hflip", [](const Array& g) { return from_grid(hflip(to_grid(g))); });

  m.def(
      "tsne",
      [](const Array& x, std::size_t iterations, std::optional<double> perplexity, std::uint64_t seed) {
        if (x.ndim() != 2) throw ShapeError("tsne: expected an (n, dim) array");
        PointMatrix p(x.shape(0), x.shape(1));
        std::copy_n(x.data(), p.values.size(), p.values.begin());
        TsneOptions o;
        o.iterations = iterations;
        o.perplexity = perplexity;
        o.seed = seed;
        Embedding2D e;
        {
          py::gil_scoped_release release;
          e = tsne(p, o);
        }
        Array coords({e.coords.n, std::size_t{2}});
        std::copy(e.coords.values.begin(), e.coords.values.end(), coords.mutable_data());
        py::dict d;
        d["coords"] = coords;
        d["kl"] = e.kl;
        d["perplexity"] = e.perplexity;
        d["kl_check"] = kl_trace_check(e).passed;
        return d;
      },
      py::arg("x"), py::arg("iterations") = 1000, py::arg("perplexity") = py::none(), py::arg("seed") = 1);
  m.def(
      "silhouette",
      [](const Array& pts, const std::vector<int>& labels) {
        PointMatrix p(pts.shape(0), pts.shape(1));
        std::copy_n(pts.data(), p.values.size(), p.values.begin());
        return silhouette_score(p, labels);
      },
      py::arg("points"), py::arg("labels"));

  m.def(
      "lrp_dense",
      [](const std::vector<Array>& weights, const std::vector<double>& x, std::size_t target, double epsilon) {
        if (weights.empty()) throw ShapeError("lrp_dense: at least one weight matrix is required");
        std::vector<LayerSpec> layers;
        for (std::size_t i = 0; i < weights.size(); ++i) {
          if (i) layers.push_back(relu("r" + std::to_string(i)));
          auto fc = dense("fc" + std::to_string(i), weights[i].shape(0));
          fc.bias = false;
          layers.push_back(fc);
        }
        Network<double> net({x.size()}, layers);
        for (std::size_t i = 0, w = 0; i < net.size(); ++i) {
          if (!net.has_params(i)) continue;
          auto& t = net.params(i).weight;
          if (static_cast<std::size_t>(weights[w].size()) != t.size()) throw ShapeError("lrp_dense: weight shape mismatch");
          std::copy_n(weights[w].data(), t.size(), t.data().begin());
          ++w;
        }
        const auto trace = forward(net, Tensor<double>({x.size()}, x), Mode::eval);
        const auto r = lrp(net, trace, target, {epsilon});
        py::dict d;
        const auto rel = r.relevance.data();
        d["relevance"] = std::vector<double>(rel.begin(), rel.end());
        d["seeded"] = r.seeded;
        d["bias_dropped"] = r.bias_dropped;
        d["epsilon_absorbed"] = r.epsilon_absorbed;
        return d;
      },
      py::arg("weights"), py::arg("x"), py::arg("target"), py::arg("epsilon") = 1e-6,
      "Relevance of a bias-free ReLU MLP given (out, in) weight matrices.");

  py::class_<AsdNet>(m, "Model")
      .def_static("load", &load_model, py::arg("path"))
      .def("save", [](const AsdNet& a, const std::filesystem::path& p) { save_model(a, p); }, py::arg("path"))
      .def_property_readonly("n_images", [](const AsdNet& a) { return a.config.n_images; })
      .def_property_readonly("dim", [](const AsdNet& a) { return a.config.dim; })
      .def_property_readonly("standardized", &AsdNet::standardized)
      .def(
          "predict",
          [](const AsdNet& a, const Array& image, const Array& hfm) {
            const auto p = fuse_and_classify(a, to_features(image, Stream::image), to_features(hfm, Stream::hfm), Mode::eval);
            return py::make_tuple(p.p_td, p.p_asd);
          },
          py::arg("image_features"), py::arg("hfm_features"), "Returns (p_td, p_asd).");

  m.def("_default_config", [] { return config_to_json(default_config()).dump(); });
  m.def("_normalize_config", [](const std::string& text) {
    const auto c = parse_config(text);
    c.validate();
    return config_to_json(c).dump();
  });
  m.def("_synth", [](const std::string& config, const std::filesystem::path& out, bool force) {
    std::ostringstream log;
    cmd_synth(parse_config(config), {out, force}, log);
    return log.str();
  });
  m.def("_run", [](const std::string& config, const std::string& run_name, std::size_t jobs,
                   std::optional<std::filesystem::path> cache_dir) {
    std::ostringstream log;
    RunSummary s;
    {
      py::gil_scoped_release release;
      s = cmd_run(parse_config(config), {run_name, jobs, cache_dir}, log);
    }
    py::dict d;
    d["run_dir"] = s.run_dir;
    d["subject_acc"] = s.metrics.subject_acc;
    d["sensitivity"] = s.metrics.sensitivity;
    d["specificity"] = s.metrics.specificity;
    d["model_acc"] = s.metrics.model_acc;
    d["auc"] = s.metrics.auc;
    py::list preds;
    for (const auto& p : s.predictions) preds.append(prediction_to_py(p));
    d["predictions"] = preds;
    d["cache_hits"] = s.cache_hits;
    d["features_computed"] = s.features_computed;
    d["log"] = log.str();
    return d;
  });
  m.def(
      "analyze",
      [](const std::filesystem::path& run_dir, const std::string& which, bool force, std::size_t tsne_iterations) {
        AnalyzeOptions o;
        o.run_dir = run_dir;
        o.which = parse_analysis(which);
        o.force = force;
        o.tsne_iterations = tsne_iterations;
        std::ostringstream log;
        py::gil_scoped_release release;
        return cmd_analyze(o, log);
      },
      py::arg("run_dir"), py::arg("which"), py::arg("force") = false, py::arg("tsne_iterations") = 1000,
      "Runs lrp, contrib or tsne on a finished run; returns the output directory.");
  m.def(
      "verify",
      [](std::uint64_t seed) {
        std::ostringstream log;
        std::vector<std::tuple<std::string, bool, std::string>> out;
        for (const auto& c : cmd_verify(seed, log)) out.emplace_back(c.name, c.passed, c.detail);
        return out;
      },
      py::arg("seed") = 1, "Built-in self checks as (name, passed, detail).");
}
