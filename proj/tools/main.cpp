#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "disfacerep/ccd.hpp"
#include "disfacerep/config.hpp"
#include "disfacerep/cooccur.hpp"
#include "disfacerep/dataset.hpp"
#include "disfacerep/detection_client.hpp"
#include "disfacerep/error.hpp"
#include "disfacerep/eval.hpp"
#include "disfacerep/experiment.hpp"
#include "disfacerep/fcam.hpp"
#include "disfacerep/image_io.hpp"
#include "disfacerep/parallel.hpp"
#include "disfacerep/segmodel.hpp"
#include "disfacerep/synthetic.hpp"
#include "disfacerep/trainer.hpp"
#include "disfacerep/vl.hpp"

namespace fs = std::filesystem;
using namespace disfacerep;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kClient = 3 };

struct Options {
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> key_flags;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string faces_path;

  std::string data, out, split = "train", model, pseudo, preds, remap, parser;
  std::string resume, kind = "component";
  int n = 500;
  int seeds = 3;
  bool no_masks = false;
  bool keep_absent = false;
};

PipelineConfig resolve_config(const Options& o) {
  PipelineConfig c;
  if (!o.config_path.empty()) {
    c = load_config(o.config_path);
  } else {
    apply_env_overrides(c);
  }
  for (const auto& [key, value] : o.key_flags) apply_override(c, key, value);
  for (const std::string& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError("--set", "expected key=value, got '" + kv + "'");
    apply_override(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) c.seed = *o.seed;
  if (o.workers) c.workers = *o.workers;
  validate(c);
  return c;
}

SyntheticFaceSpec face_spec_for(const Options& o, const PipelineConfig& c) {
  return o.faces_path.empty() ? SyntheticFaceSpec::default_faces(c.input_size)
                              : SyntheticFaceSpec::from_yaml_file(o.faces_path);
}

std::string redacted_config(PipelineConfig c) {
  if (!c.detector.auth_token.empty()) c.detector.auth_token = "<redacted>";
  if (!c.vl.auth_token.empty()) c.vl.auth_token = "<redacted>";
  return serialize_config(c);
}

// One manifest per run; artifact checksums cover every file under out except
// the manifest itself.
void write_run_manifest(const std::string& out_dir, const std::string& subcommand, const PipelineConfig& config,
                        const std::map<std::string, std::string>& inputs, double seconds) {
  nlohmann::ordered_json j;
  j["subcommand"] = subcommand;
  j["seed"] = config.seed;
  j["config"] = redacted_config(config);
  nlohmann::ordered_json in = nlohmann::ordered_json::object();
  for (const auto& [k, v] : inputs) in[k] = v.empty() ? v : fs::absolute(v).string();
  j["inputs"] = in;
  j["output"] = fs::absolute(out_dir).string();
  j["seconds"] = seconds;
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(out_dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), out_dir).generic_string();
    if (rel != "run_manifest.json") files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  nlohmann::ordered_json sums = nlohmann::ordered_json::object();
  for (const std::string& f : files) sums[f] = sha256_file((fs::path(out_dir) / f).string());
  j["artifacts"] = sums;
  write_file((fs::path(out_dir) / "run_manifest.json").string(), j.dump(2) + "\n");
}

std::vector<Sample> load_split(const std::string& root, const std::string& split, const PipelineConfig& config,
                               ComponentSchema* schema_out = nullptr) {
  const ComponentSchema schema = dataset_schema(root);
  const DatasetManifest manifest = scan_dataset(root, split, schema);
  LoadReport report;
  std::vector<Sample> samples = load_dataset(manifest, config.input_size, report, config.workers);
  for (const auto& [id, msg] : report.errors) spdlog::warn("{}: {}", id, msg);
  if (samples.empty()) throw DataError("no usable samples in '" + root + "'");
  if (schema_out) *schema_out = schema;
  return samples;
}

std::vector<LabeledFace> faces_of(const std::vector<Sample>& samples) {
  std::vector<LabeledFace> faces;
  faces.reserve(samples.size());
  for (const Sample& s : samples) faces.push_back(s.face);
  return faces;
}

std::map<std::string, SegMask> read_mask_manifest(const std::string& dir) {
  const PseudoManifest m = read_pseudo_manifest(dir);
  std::map<std::string, SegMask> out;
  for (const auto& [id, rel] : m.entries) out.emplace(id, read_mask((fs::path(dir) / rel).string()));
  return out;
}

void cmd_synth(const Options& o, const PipelineConfig& c) {
  const SyntheticFaceSpec spec = face_spec_for(o, c);
  const std::vector<Sample> samples = generate_synthetic(spec, o.n, Rng(c.seed).substream("corpus"));
  write_dataset(o.out, samples, spec.schema, o.split, !o.no_masks);
  spdlog::info("wrote {} synthetic faces to {}", samples.size(), o.out);
}

void cmd_analyze(const Options& o, const PipelineConfig& c) {
  ComponentSchema schema = ComponentSchema::synthetic();
  const std::vector<Sample> samples = load_split(o.data, o.split, c, &schema);
  std::vector<Label> labels;
  for (const Sample& s : samples) labels.push_back(s.face.label);
  CooccurrenceReport report = compute_cooccurrence(labels);
  report.dominant = select_dominant(report, schema, c.dominance_threshold);
  fs::create_directories(o.out);
  write_file((fs::path(o.out) / "cooccurrence.json").string(), report_json(report, schema) + "\n");
  write_frequency_chart(report, schema, (fs::path(o.out) / "frequency.png").string());
}

void cmd_ccd(const Options& o, const PipelineConfig& c) {
  ComponentSchema schema = ComponentSchema::synthetic();
  const std::vector<Sample> samples = load_split(o.data, o.split, c, &schema);
  const std::vector<LabeledFace> faces = faces_of(samples);
  std::vector<Label> labels;
  for (const LabeledFace& f : faces) labels.push_back(f.label);
  const std::vector<int> candidates = select_dominant(compute_cooccurrence(labels), schema, c.dominance_threshold);
  auto client = make_detection_client(c, schema, samples);
  const DebiasedSet set = build_debiased_set(faces, candidates, schema, c, *client, Rng(c.seed).substream("ccd"));
  std::vector<Sample> out(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) out[i].face = set.faces[i];
  write_dataset(o.out, out, schema, o.split, false);
  std::string log;
  for (const CcdRecord& r : set.records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    std::vector<std::string> selected, masked;
    for (int k : r.selected) selected.push_back(schema.name(k));
    for (int k : r.plan.masked_components) masked.push_back(schema.name(k));
    j["selected"] = selected;
    nlohmann::ordered_json boxes = nlohmann::ordered_json::array();
    for (const Detection& d : r.plan.accepted) {
      boxes.push_back({{"component", schema.name(d.component)},
                       {"box", {d.box.h1, d.box.w1, d.box.h2, d.box.w2}},
                       {"confidence", d.confidence}});
    }
    j["accepted"] = boxes;
    j["masked"] = masked;
    if (!r.error.empty()) j["error"] = r.error;
    log += j.dump() + "\n";
  }
  write_file((fs::path(o.out) / "mask_plans.jsonl").string(), log);
  if (set.client_errors > 0) spdlog::warn("{} images kept unmasked after detector errors", set.client_errors);
}

void cmd_train(const Options& o, const PipelineConfig& c) {
  ComponentSchema schema = ComponentSchema::synthetic();
  const std::vector<Sample> samples = load_split(o.data, o.split, c, &schema);
  const VLEncoderPair vl = make_vl_pair(c, schema, face_spec_for(o, c));
  fs::create_directories(o.out);
  TrainIO io;
  io.log_path = (fs::path(o.out) / "loss_log.jsonl").string();
  io.checkpoint_path = (fs::path(o.out) / "train_state.ckpt").string();
  io.resume_from = o.resume;
  io.on_step = [&](const StepRecord& r) {
    if (r.step % 50 == 0) spdlog::info("step {} epoch {} objective {:.4f}", r.step, r.epoch, r.loss.objective);
  };
  const TrainOutcome trained = train_classifier(faces_of(samples), schema, c, vl, io);
  save_model((fs::path(o.out) / "model.ckpt").string(), trained.model, schema, c);
}

void check_components(const std::vector<std::string>& names, const ComponentSchema& schema) {
  if (names != schema.names()) throw DataError("model components do not match the dataset schema");
}

void cmd_pseudolabel(const Options& o, const PipelineConfig& c) {
  ComponentSchema schema = ComponentSchema::synthetic();
  const std::vector<Sample> samples = load_split(o.data, o.split, c, &schema);
  std::vector<std::string> names;
  const nn::Classifier<float> model = load_model(o.model, &names);
  check_components(names, schema);
  const PseudoManifest m =
      write_pseudo_labels(faces_of(samples), model, c.theta, o.out, parse_fusion(c.model.fcam_fusion), c.workers);
  for (const auto& [id, msg] : m.errors) spdlog::error("{}: {}", id, msg);
  if (!m.errors.empty()) throw DataError(std::to_string(m.errors.size()) + " pseudo masks could not be written");
}

void cmd_trainparser(const Options& o, const PipelineConfig& c) {
  ComponentSchema schema = ComponentSchema::synthetic();
  const std::vector<Sample> samples = load_split(o.data, o.split, c, &schema);
  const std::map<std::string, SegMask> pseudo = read_mask_manifest(o.pseudo);
  std::vector<ParserSample> train;
  for (const Sample& s : samples) {
    auto it = pseudo.find(s.face.id);
    if (it == pseudo.end()) continue;
    train.push_back({s.face.pixels, resize_mask(it->second, c.input_size, c.input_size)});
  }
  if (train.empty()) throw DataError("no pseudo masks match the dataset ids");
  const ParserOutcome out = train_parser(train, schema.size() + 1, c);
  fs::create_directories(o.out);
  save_parser((fs::path(o.out) / "parser.ckpt").string(), out.model);
  std::string log;
  for (std::size_t i = 0; i < out.losses.size(); ++i) {
    log += nlohmann::json({{"step", i + 1}, {"loss", out.losses[i]}}).dump() + "\n";
  }
  write_file((fs::path(o.out) / "parser_log.jsonl").string(), log);
}

void cmd_predict(const Options& o, const PipelineConfig& c) {
  const std::vector<Sample> samples = load_split(o.data, o.split, c);
  const SegModel model = load_parser(o.parser);
  std::vector<SegMask> preds(samples.size());
  parallel_for(static_cast<int>(samples.size()), c.workers, [&](int i) { preds[i] = model.predict(samples[i].face.pixels); });
  fs::create_directories(fs::path(o.out) / "masks");
  std::string manifest;
  std::vector<std::pair<std::string, std::size_t>> order;
  for (std::size_t i = 0; i < samples.size(); ++i) order.emplace_back(samples[i].face.id, i);
  std::sort(order.begin(), order.end());
  for (const auto& [id, i] : order) {
    write_mask((fs::path(o.out) / "masks" / (id + ".png")).string(), preds[i]);
    manifest += id + "\tmasks/" + id + ".png\n";
  }
  write_file((fs::path(o.out) / "manifest.txt").string(), manifest);
}

void cmd_eval(const Options& o, const PipelineConfig& c) {
  ComponentSchema schema = ComponentSchema::synthetic();
  const std::vector<Sample> samples = load_split(o.data, o.split, c, &schema);
  const std::map<std::string, SegMask> preds_by_id = read_mask_manifest(o.preds);
  std::vector<SegMask> preds, gts;
  for (const Sample& s : samples) {
    auto it = preds_by_id.find(s.face.id);
    if (it == preds_by_id.end()) throw DataError("no prediction for '" + s.face.id + "'");
    preds.push_back(resize_mask(it->second, s.mask.height, s.mask.width));
    gts.push_back(s.mask);
  }
  ComponentSchema target = schema;
  if (!o.remap.empty()) {
    const LabelRemap remap = LabelRemap::load(o.remap);
    preds = remap_masks(preds, remap);
    if (schema.label() == remap.source) gts = remap_masks(gts, remap);
    target = ComponentSchema::from_name_or_file(remap.target);
  }
  const F1Report report = f1_report(preds, gts, target, !o.keep_absent);
  fs::create_directories(o.out);
  write_file((fs::path(o.out) / "f1_report.json").string(), f1_report_json(report) + "\n");
  spdlog::info("mean F1 {:.4f} over {} samples", report.mean_f1, samples.size());
}

void cmd_ablation(const Options& o, const PipelineConfig& c) {
  const SyntheticFaceSpec spec = face_spec_for(o, c);
  std::vector<Variant> variants;
  if (o.kind == "component") {
    variants = component_ablation(c);
  } else if (o.kind == "loss") {
    variants = loss_ablation(c);
  } else {
    throw ValidationError("--kind", "must be component or loss");
  }
  std::vector<std::uint64_t> seeds;
  for (int s = 0; s < o.seeds; ++s) seeds.push_back(c.seed + static_cast<std::uint64_t>(s));
  const AblationResult r = run_ablation(variants, spec, o.n, seeds, [](const std::string& v, std::uint64_t s, double f1, double) {
    spdlog::info("{} seed {}: mean F1 {:.4f}", v, s, f1);
  });
  std::vector<std::pair<std::string, F1Report>> runs;
  for (std::size_t i = 0; i < r.names.size(); ++i) {
    F1Report rep = r.reports[i];
    rep.mean_f1 = r.mean[i];
    runs.emplace_back(r.names[i], rep);
  }
  const AblationTable table = ablation_table(runs);
  fs::create_directories(o.out);
  write_file((fs::path(o.out) / "ablation.md").string(), table.to_markdown());
  nlohmann::ordered_json j;
  j["variants"] = r.names;
  j["seeds"] = r.seeds;
  j["mean_f1"] = r.mean;
  j["f1_per_seed"] = r.f1;
  j["table"] = nlohmann::ordered_json::parse(table.to_json());
  write_file((fs::path(o.out) / "ablation.json").string(), j.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised face parsing with component disentanglement"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("-c,--config", o.config_path, "YAML config file")->check(CLI::ExistingFile);
  app.add_option("--set", o.sets, "Config override key=value (repeatable)");
  app.add_option("--seed", o.seed, "Random seed");
  app.add_option("--workers", o.workers, "Data-parallel workers");
  app.add_option("--faces", o.faces_path, "Synthetic face spec (YAML)")->check(CLI::ExistingFile);
  for (const ConfigKey& k : config_keys()) {
    if (k.path == "seed" || k.path == "workers") continue;
    app.add_option_function<std::string>("--" + k.path, [&o, p = k.path](const std::string& v) { o.key_flags[p] = v; },
                                         "Config key " + k.path);
  }

  struct Sub {
    CLI::App* app;
    void (*run)(const Options&, const PipelineConfig&);
    std::vector<std::pair<std::string, std::string*>> inputs;
  };
  std::vector<Sub> subs;
  auto add_out = [&](CLI::App* s) { s->add_option("-o,--out", o.out, "Output directory")->required(); };
  auto add_data = [&](CLI::App* s) {
    s->add_option("-d,--data", o.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
    s->add_option("--split", o.split, "Split name");
  };

  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic face dataset");
  add_out(synth);
  synth->add_option("-n,--count", o.n, "Number of faces")->check(CLI::PositiveNumber);
  synth->add_option("--split", o.split, "Split name");
  synth->add_flag("--no-masks", o.no_masks, "Omit ground-truth masks");
  subs.push_back({synth, cmd_synth, {{"faces", &o.faces_path}}});

  CLI::App* analyze = app.add_subcommand("analyze", "Component frequency and co-occurrence report");
  add_data(analyze);
  add_out(analyze);
  subs.push_back({analyze, cmd_analyze, {{"data", &o.data}}});

  CLI::App* ccd = app.add_subcommand("ccd", "Build the debiased training set by masking dominant components");
  add_data(ccd);
  add_out(ccd);
  subs.push_back({ccd, cmd_ccd, {{"data", &o.data}}});

  CLI::App* train = app.add_subcommand("train", "Train the component classifier");
  add_data(train);
  add_out(train);
  train->add_option("--resume", o.resume, "Training checkpoint to resume from")->check(CLI::ExistingFile);
  subs.push_back({train, cmd_train, {{"data", &o.data}, {"resume", &o.resume}, {"faces", &o.faces_path}}});

  CLI::App* pseudo = app.add_subcommand("pseudolabel", "Write pseudo masks from activation maps");
  add_data(pseudo);
  add_out(pseudo);
  pseudo->add_option("-m,--model", o.model, "Classifier checkpoint")->required()->check(CLI::ExistingFile);
  subs.push_back({pseudo, cmd_pseudolabel, {{"data", &o.data}, {"model", &o.model}}});

  CLI::App* tparser = app.add_subcommand("trainparser", "Train the segmentation network on pseudo masks");
  add_data(tparser);
  add_out(tparser);
  tparser->add_option("-p,--pseudo", o.pseudo, "Pseudo mask directory")->required()->check(CLI::ExistingDirectory);
  subs.push_back({tparser, cmd_trainparser, {{"data", &o.data}, {"pseudo", &o.pseudo}}});

  CLI::App* predict = app.add_subcommand("predict", "Run the segmentation network");
  add_data(predict);
  add_out(predict);
  predict->add_option("--parser", o.parser, "Parser checkpoint")->required()->check(CLI::ExistingFile);
  subs.push_back({predict, cmd_predict, {{"data", &o.data}, {"parser", &o.parser}}});

  CLI::App* eval = app.add_subcommand("eval", "Pixel F1 of predicted masks against ground truth");
  add_data(eval);
  add_out(eval);
  eval->add_option("--preds", o.preds, "Directory with manifest.txt and masks")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--remap", o.remap, "Label remap table")->check(CLI::ExistingFile);
  eval->add_flag("--keep-absent", o.keep_absent, "Score classes without support as 0");
  subs.push_back({eval, cmd_eval, {{"data", &o.data}, {"preds", &o.preds}, {"remap", &o.remap}}});

  CLI::App* ablation = app.add_subcommand("ablation", "Synthetic ablation over CCD/TCD or loss terms");
  add_out(ablation);
  ablation->add_option("--kind", o.kind, "component | loss");
  ablation->add_option("-n,--count", o.n, "Faces per seed")->check(CLI::PositiveNumber);
  ablation->add_option("--seeds", o.seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  subs.push_back({ablation, cmd_ablation, {{"faces", &o.faces_path}}});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    const PipelineConfig config = resolve_config(o);
    for (const Sub& s : subs) {
      if (!s.app->parsed()) continue;
      const auto t0 = std::chrono::steady_clock::now();
      fs::create_directories(o.out);
      s.run(o, config);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::map<std::string, std::string> inputs;
      for (const auto& [name, value] : s.inputs) inputs[name] = *value;
      inputs["config"] = o.config_path;
      write_run_manifest(o.out, s.app->get_name(), config, inputs, secs);
    }
  } catch (const ClientError& e) {
    spdlog::error("{}", e.what());
    return kClient;
  } catch (const ConfigError& e) {
    spdlog::error("config: {}", e.what());
    return kUsage;
  } catch (const ValidationError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kData;
  }
  return kOk;
}
