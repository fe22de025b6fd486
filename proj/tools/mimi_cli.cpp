#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mimi/experiment.hpp"
#include "mimi/format.hpp"

namespace fs = std::filesystem;
using namespace mimi;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("-c,--config", common.config_file, "key=value config file");
  cmd->add_option("--set", common.sets, "override as key=value (repeatable)");
  cmd->add_flag("-q,--quiet", common.quiet, "no progress output");
  cmd->allow_extras();
  cmd->footer("Any config key may also be passed as --key=value, e.g. --target.train.epochs=50");
}

/// Config file, then --set pairs, then bare --key=value / --key value extras.
ExperimentConfig build_config(const Common& common, const std::vector<std::string>& extras) {
  ExperimentConfig c = common.config_file.empty() ? ExperimentConfig{} : load_config(common.config_file);
  for (const auto& s : common.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    apply_setting(c, s.substr(0, eq), s.substr(eq + 1));
  }
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + arg + "'");
    const auto eq = arg.find('=');
    if (eq != std::string::npos) {
      apply_setting(c, arg.substr(2, eq - 2), arg.substr(eq + 1));
    } else if (i + 1 < extras.size()) {
      apply_setting(c, arg.substr(2), extras[++i]);
    } else {
      throw ConfigError("missing value for '" + arg + "'");
    }
  }
  return c;
}

RunContext context_for(const ExperimentConfig& c, const Common& common, ModelCache* cache) {
  RunContext ctx;
  ctx.cache = cache;
  ctx.log = common.quiet ? nullptr : &std::cerr;
  ctx.output_root = resolve_output_root(c);
  return ctx;
}

void print_summary(const PipelineResult& r) {
  std::vector<ReportEntry> entries{{"target", r.report}};
  for (const auto& b : r.baselines) entries.push_back({"target", b});
  std::cout << emit_report(entries, ReportFormat::text_table);
  if (!r.run_dir.empty()) std::cout << "run directory: " << r.run_dir.string() << '\n';
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

int cmd_gen_data(const std::string& spec, const std::string& out, const std::string& format,
                 const std::string& labels) {
  const Dataset d = synth_generate(spec);
  if (format == "idx") {
    save_idx(out, d, labels.empty() ? std::nullopt : std::optional<fs::path>(labels));
  } else if (format == "raw") {
    save_raw(out, d);
  } else {
    throw std::invalid_argument("gen-data: format must be idx or raw");
  }
  std::cout << "wrote " << d.size() << " images of " << d.channels() << "x" << d.side() << "x"
            << d.side() << " to " << out << '\n';
  return 0;
}

int cmd_pretrain(const ExperimentConfig& c, const Common& common, const std::string& role) {
  c.validate();
  Dataset data = load_dataset(c.data_format == DataFormat::synthetic ? c.data_spec : c.data_path,
                              c.data_format);
  if (c.normalize) data = normalize(data);
  const SplitIndices s = split(data, c.split_spec());
  const bool target = role == "target";
  if (!target && role != "shadow") throw std::invalid_argument("--role must be target or shadow");
  const ModelConfig mc = target ? c.target_model : c.shadow_model();
  const TrainConfig tc = target ? c.target_train_config() : c.shadow_train_config();
  const auto& idx = target ? s.target_train : s.shadow_train;
  TrainHooks hooks;
  hooks.progress = common.quiet ? nullptr : &std::cerr;
  const PretrainResult r = pretrain(mc, tc, data, idx, hooks);
  const fs::path dir = make_run_dir(resolve_output_root(c), "pretrain-" + role, c.fingerprint());
  std::ofstream(dir / "config.txt") << c.to_text();
  save_model(dir / (role + ".model"), r.model);
  std::ofstream log(dir / (role + "_train_log.csv"));
  r.log.write_csv(log);
  std::cout << "final loss " << format_double(r.log.mean_loss.back()) << "\nrun directory: "
            << dir.string() << '\n';
  return 0;
}

/// Threshold table over run directories: dataset from data.spec (or path),
/// encoder from target depth and width.
int cmd_report(const std::vector<std::string>& inputs, const std::string& format_name,
               bool thresholds) {
  const ReportFormat format = parse_report_format(format_name);
  if (thresholds) {
    std::vector<ThresholdCell> cells;
    for (const auto& in : inputs) {
      const ExperimentConfig c = load_config(fs::path(in) / "config.txt");
      const std::string text = read_file(fs::path(in) / "report.txt");
      const auto kv = parse_kv_text(text.substr(0, text.find("\n[")));
      const std::string dataset =
          c.data_format == DataFormat::synthetic ? c.data_spec.substr(0, c.data_spec.find(','))
                                                 : fs::path(c.data_path).filename().string();
      const std::string encoder = "L" + std::to_string(c.target_model.encoder_layers) + "-D" +
                                  std::to_string(c.target_model.embed_dim);
      cells.push_back({dataset, encoder, parse_double(kv.at("threshold"), "threshold")});
    }
    std::cout << threshold_table(cells).render(format);
    return 0;
  }
  Table all;
  for (const auto& in : inputs) {
    const std::string text = read_file(fs::path(in) / "report.txt");
    const auto pos = text.find("[reports]\n");
    if (pos == std::string::npos) throw std::runtime_error(in + ": report has no [reports] block");
    Table t = parse_csv_table(text.substr(pos + 10));
    if (all.columns.empty()) all.columns = t.columns;
    for (auto& row : t.rows) {
      if (inputs.size() > 1) row[0] = fs::path(in).filename().string();
      all.rows.push_back(std::move(row));
    }
  }
  if (all.columns.empty()) all.columns = report_columns();
  std::cout << all.render(format);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked image modeling pretraining and membership inference experiments"};
  app.require_subcommand(1);

  std::string spec = "blobs", out, format = "idx", labels;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset to disk");
  gen->add_option("spec", spec, "synthetic spec, e.g. blobs,n=1000,side=32")->required();
  gen->add_option("-o,--out", out, "output file")->required();
  gen->add_option("--format", format, "idx or raw")->check(CLI::IsMember({"idx", "raw"}));
  gen->add_option("--labels", labels, "IDX label file (idx format only)");

  Common pre_c, att_c, base_c, grid_c;
  std::string role = "target";
  auto* pre = app.add_subcommand("pretrain", "train one masked autoencoder and save it");
  add_common(pre, pre_c);
  pre->add_option("--role", role, "target or shadow")->check(CLI::IsMember({"target", "shadow"}));

  auto* att = app.add_subcommand("attack", "run the full pipeline and attack");
  add_common(att, att_c);

  std::string methods = "A,B,C,D";
  auto* base = app.add_subcommand("baseline", "run the pipeline plus baseline attacks");
  add_common(base, base_c);
  base->add_option("--methods", methods, "comma-separated subset of A,B,C,D");

  auto* grid = app.add_subcommand("grid", "run every cell of the configured grid axes");
  add_common(grid, grid_c);

  std::vector<std::string> inputs;
  std::string report_format = "text-table";
  bool thresholds = false;
  auto* rep = app.add_subcommand("report", "re-emit reports from run directories");
  rep->add_option("runs", inputs, "run directories")->required()->check(CLI::ExistingDirectory);
  rep->add_option("--format", report_format, "csv or text-table");
  rep->add_flag("--thresholds", thresholds, "threshold table: datasets x encoders");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_data(spec, out, format, labels);
    if (*pre) return cmd_pretrain(build_config(pre_c, pre->remaining()), pre_c, role);
    if (*att) {
      ModelCache cache;
      const ExperimentConfig c = build_config(att_c, att->remaining());
      print_summary(run_pipeline(c, context_for(c, att_c, &cache)));
      return 0;
    }
    if (*base) {
      ModelCache cache;
      ExperimentConfig c = build_config(base_c, base->remaining());
      apply_setting(c, "baseline.methods", methods);
      print_summary(run_pipeline(c, context_for(c, base_c, &cache)));
      return 0;
    }
    if (*grid) {
      ModelCache cache;
      const ExperimentConfig c = build_config(grid_c, grid->remaining());
      const GridResult g = run_grid(c, context_for(c, grid_c, &cache));
      std::cout << g.aggregate().render(ReportFormat::text_table);
      for (const auto& cell : g.cells) {
        if (!cell.ok) std::cout << "failed [" << cell.stage << "]: " << cell.error << '\n';
      }
      std::cout << "run directory: " << g.run_dir.string() << '\n';
      return g.failures() == 0 ? 0 : 1;
    }
    if (*rep) return cmd_report(inputs, report_format, thresholds);
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
