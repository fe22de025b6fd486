#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "mimi/experiment.hpp"

namespace py = pybind11;
using namespace mimi;

namespace {

py::array_t<float> images_array(const Dataset& d) {
  py::array_t<float> out({d.size(), d.channels(), d.side(), d.side()});
  std::copy(d.pixels().begin(), d.pixels().end(), out.mutable_data());
  return out;
}

Dataset dataset_from_array(py::array_t<float, py::array::c_style | py::array::forcecast> images,
                           std::vector<int> labels, std::string name) {
  if (images.ndim() != 3 && images.ndim() != 4) {
    throw std::invalid_argument("images must be [n, s, s] or [n, c, s, s]");
  }
  const bool gray = images.ndim() == 3;
  const std::size_t channels = gray ? 1 : std::size_t(images.shape(1));
  const std::size_t side = std::size_t(images.shape(images.ndim() - 1));
  if (std::size_t(images.shape(images.ndim() - 2)) != side) {
    throw std::invalid_argument("images must be square");
  }
  std::vector<float> px(images.data(), images.data() + images.size());
  return Dataset(std::move(name), channels, side, std::move(px), std::move(labels));
}

py::dict report_dict(const AttackReport& r) {
  auto stats = [](const SummaryStats& s) {
    py::dict d;
    d["count"] = s.count;
    d["mean"] = s.mean;
    d["std"] = s.stddev;
    d["q1"] = s.q1;
    d["median"] = s.median;
    d["q3"] = s.q3;
    return d;
  };
  py::dict d;
  d["method"] = r.method;
  d["threshold"] = r.threshold.value;
  d["objective"] = r.threshold.objective;
  d["asr"] = r.asr;
  d["member"] = stats(r.member_stats);
  d["nonmember"] = stats(r.nonmember_stats);
  std::vector<std::size_t> ids;
  std::vector<double> scores;
  std::vector<bool> members, verdicts;
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    ids.push_back(r.records[i].sample_id);
    scores.push_back(r.records[i].score);
    members.push_back(r.records[i].is_member);
    verdicts.push_back(r.verdicts[i] == Verdict::member);
  }
  d["sample_id"] = ids;
  d["score"] = scores;
  d["is_member"] = members;
  d["predicted_member"] = verdicts;
  return d;
}

template <typename T>
void bind_kv(py::class_<T>& cls) {
  cls.def("to_dict", &T::to_kv)
      .def_static("from_dict", &T::from_kv)
      .def("__repr__", [](const T& c) {
        std::string s = "{";
        for (const auto& [k, v] : c.to_kv()) s += (s.size() > 1 ? ", " : "") + k + "=" + v;
        return s + "}";
      });
}

}  // namespace

PYBIND11_MODULE(_mimi, m) {
  m.doc() = "Masked image modeling pretraining and membership inference";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<StageError>(m, "StageError", PyExc_RuntimeError);

  py::class_<ModelConfig> model_config(m, "ModelConfig");
  model_config.def(py::init<>())
      .def_readwrite("image_side", &ModelConfig::image_side)
      .def_readwrite("channels", &ModelConfig::channels)
      .def_readwrite("patch_side", &ModelConfig::patch_side)
      .def_readwrite("embed_dim", &ModelConfig::embed_dim)
      .def_readwrite("encoder_layers", &ModelConfig::encoder_layers)
      .def_readwrite("decoder_layers", &ModelConfig::decoder_layers)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("mask_ratio", &ModelConfig::mask_ratio)
      .def_readwrite("dropout_rate", &ModelConfig::dropout_rate)
      .def_readwrite("decoder_dim", &ModelConfig::decoder_dim)
      .def_readwrite("decoder_heads", &ModelConfig::decoder_heads)
      .def_readwrite("mlp_ratio", &ModelConfig::mlp_ratio)
      .def_property_readonly("n_patches", &ModelConfig::n_patches)
      .def_property_readonly("n_masked", &ModelConfig::n_masked)
      .def("validate", &ModelConfig::validate);
  bind_kv(model_config);

  py::class_<TrainConfig> train_config(m, "TrainConfig");
  train_config.def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("dropout_rate", &TrainConfig::dropout_rate)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("clip_norm", &TrainConfig::clip_norm);
  bind_kv(train_config);

  py::class_<Dataset>(m, "Dataset")
      .def(py::init(&dataset_from_array), py::arg("images"), py::arg("labels") = std::vector<int>{},
           py::arg("name") = "array")
      .def_property_readonly("name", &Dataset::name)
      .def_property_readonly("channels", &Dataset::channels)
      .def_property_readonly("side", &Dataset::side)
      .def("__len__", &Dataset::size)
      .def("images", &images_array, "copy of the pixels as [n, c, s, s] float32")
      .def("labels", [](const Dataset& d) {
        return std::vector<int>(d.labels().begin(), d.labels().end());
      });

  m.def("synth_generate", py::overload_cast<std::string_view>(&synth_generate), py::arg("spec"));
  m.def("normalize", &normalize);
  m.def("load_idx", &load_idx, py::arg("images"), py::arg("labels") = std::nullopt);
  m.def("save_idx", &save_idx, py::arg("path"), py::arg("dataset"), py::arg("labels") = std::nullopt);
  m.def(
      "split",
      [](std::size_t n, std::size_t shadow_train, std::size_t shadow_test,
         std::size_t target_train, std::size_t target_test, std::uint64_t seed) {
        const SplitIndices s =
            split(n, SplitSpec{shadow_train, shadow_test, target_train, target_test, seed});
        py::dict d;
        d["shadow_train"] = s.shadow_train;
        d["shadow_test"] = s.shadow_test;
        d["target_train"] = s.target_train;
        d["target_test"] = s.target_test;
        d["rest"] = s.rest;
        return d;
      },
      py::arg("n"), py::arg("shadow_train") = 256, py::arg("shadow_test") = 256,
      py::arg("target_train") = 256, py::arg("target_test") = 256, py::arg("seed") = 0);

  py::class_<ModelPair>(m, "ModelPair")
      .def_static("create", &ModelPair::create, py::arg("config"), py::arg("seed") = 0)
      .def_readonly("config", &ModelPair::config)
      .def("checksum", [](const ModelPair& p) { return checksum(p.parameters()); })
      .def("save", [](const ModelPair& p, const std::filesystem::path& path) { save_model(path, p); })
      .def_static("load", [](const std::filesystem::path& path) { return load_model(path).model; });

  m.def(
      "pretrain",
      [](const ModelConfig& mc, const TrainConfig& tc, const Dataset& data,
         std::vector<std::size_t> indices) {
        py::gil_scoped_release release;
        PretrainResult r = pretrain(mc, tc, data, indices);
        return std::make_pair(std::move(r.model), r.log.mean_loss);
      },
      py::arg("model_config"), py::arg("train_config"), py::arg("dataset"), py::arg("indices"),
      "returns (model, per-epoch mean loss)");

  m.def(
      "score_samples",
      [](const ModelPair& p, const Dataset& data, std::vector<std::size_t> indices,
         std::size_t n_draws, std::uint64_t seed, const std::string& scope) {
        return score_samples(p.encoder, p.decoder, data, indices,
                             ScoreOptions{n_draws, parse_scope(scope)}, seed);
      },
      py::arg("model"), py::arg("dataset"), py::arg("indices"), py::arg("n_draws") = 4,
      py::arg("seed") = 0, py::arg("scope") = "masked_only");

  m.def(
      "search_threshold",
      [](std::vector<double> members, std::vector<double> nonmembers) {
        const Threshold t = search_threshold(members, nonmembers);
        return std::make_pair(t.value, t.objective);
      },
      py::arg("member_scores"), py::arg("nonmember_scores"), "returns (value, balanced accuracy)");
  m.def("infer", [](double score, double threshold) { return score < threshold; },
        py::arg("score"), py::arg("threshold"), "True means member");

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init<>())
      .def_static("parse", &parse_config, py::arg("text"))
      .def_static("load", &load_config, py::arg("path"))
      .def("set", &apply_setting, py::arg("key"), py::arg("value"))
      .def("validate", &ExperimentConfig::validate)
      .def("to_text", &ExperimentConfig::to_text)
      .def("fingerprint", &ExperimentConfig::fingerprint)
      .def_readwrite("seed", &ExperimentConfig::seed);

  m.def(
      "run_pipeline",
      [](const ExperimentConfig& c, const std::string& output_root) {
        RunContext ctx;
        ctx.output_root = output_root;
        PipelineResult r;
        {
          py::gil_scoped_release release;
          r = run_pipeline(c, ctx);
        }
        py::dict d = report_dict(r.report);
        py::list baselines;
        for (const auto& b : r.baselines) baselines.append(report_dict(b));
        d["baselines"] = baselines;
        d["run_dir"] = r.run_dir.string();
        d["report_text"] = pipeline_report_text(c, r);
        return d;
      },
      py::arg("config"), py::arg("output_root") = "");

  m.def(
      "run_grid",
      [](const ExperimentConfig& c, const std::string& output_root) {
        RunContext ctx;
        ctx.output_root = output_root;
        GridResult g;
        {
          py::gil_scoped_release release;
          g = run_grid(c, ctx);
        }
        py::dict d;
        d["aggregate_csv"] = g.aggregate().render(ReportFormat::csv);
        d["failures"] = g.failures();
        d["run_dir"] = g.run_dir.string();
        return d;
      },
      py::arg("config"), py::arg("output_root") = "");
}
