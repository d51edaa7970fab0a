// Command-line front end: dataset management, classifier pretraining,
// adversarial obfuscator training, evaluation/reporting, and the
// edge-obfuscate / cloud-classify pair.

#include <CLI11.hpp>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cloak/analysis.hpp"
#include "cloak/checkpoint.hpp"
#include "cloak/data.hpp"
#include "cloak/image_io.hpp"
#include "cloak/offload.hpp"
#include "cloak/trainer.hpp"

using namespace cloak;

namespace {

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open: " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

DatasetSplit pick_split(Cifar10& ds, const std::string& which) {
  if (which == "train") return std::move(ds.train);
  if (which == "test") return std::move(ds.test);
  throw Error("unknown split: " + which);
}

DatasetSplit load_split(const std::string& data_dir, const std::string& which, int subset,
                        std::uint64_t seed) {
  Cifar10 ds = load_cifar10(data_dir);
  DatasetSplit split = pick_split(ds, which);
  if (subset > 0) split = stratified_subset(split, subset, seed);
  return split;
}

std::pair<std::string, int> parse_bind(const std::string& addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos) throw Error("address must be host:port, got " + addr);
  return {addr.substr(0, colon), std::stoi(addr.substr(colon + 1))};
}

NetworkHandle obfuscator_from_checkpoint(const std::string& path) {
  if (path == "identity") return build_obfuscator(identity_spec());
  TrainingCheckpoint ckpt = load_training_checkpoint(path);
  return ckpt.obf;
}

int cmd_data_synth(const std::string& out_dir, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.seed = seed;
  write_synthetic_cifar10(out_dir, cfg);
  auto checks = verify_cifar10(out_dir, read_checksum_file(out_dir));
  for (const auto& fc : checks)
    std::printf("%-18s %10llu bytes  crc32 %s  %s\n", fc.name.c_str(),
                static_cast<unsigned long long>(fc.size), fc.crc32.c_str(),
                fc.error.empty() ? "ok" : fc.error.c_str());
  std::printf("wrote synthetic corpus to %s\n", out_dir.c_str());
  return 0;
}

int cmd_data_verify(const std::string& root) {
  auto checks = verify_cifar10(root, read_checksum_file(root));
  bool all_ok = true;
  for (const auto& fc : checks) {
    std::printf("%-18s %10llu bytes  crc32 %-8s  %s\n", fc.name.c_str(),
                static_cast<unsigned long long>(fc.size), fc.crc32.c_str(),
                fc.error.empty() ? "ok" : fc.error.c_str());
    if (!fc.error.empty()) all_ok = false;
  }
  return all_ok ? 0 : 1;
}

int cmd_data_fetch(const std::string& root, bool synth, std::uint64_t seed) {
  auto checks = verify_cifar10(root, read_checksum_file(root));
  bool all_ok = true;
  for (const auto& fc : checks)
    if (!fc.error.empty()) all_ok = false;
  if (all_ok) {
    std::printf("dataset already present and valid at %s\n", root.c_str());
    return 0;
  }
  if (synth) return cmd_data_synth(root, seed);
  std::fprintf(stderr,
               "dataset missing or invalid at %s\n"
               "place the six standard binary batch files there "
               "(data_batch_1..5.bin, test_batch.bin), or rerun with "
               "--synthesize to generate a synthetic stand-in corpus\n",
               root.c_str());
  return 1;
}

int cmd_pretrain(const std::string& data_dir, const std::string& arch, int classes,
                 int subset, int epochs, int batch, double lr, std::uint64_t seed,
                 const std::string& out) {
  DatasetSplit train = load_split(data_dir, "train", subset, seed);
  if (classes != train.class_count)
    throw Error("dataset has " + std::to_string(train.class_count) + " classes");
  TrainingConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = batch;
  cfg.base_lr = lr;
  cfg.seed = seed;
  std::printf("pretraining %s on %d images, %d epochs\n", arch.c_str(), train.size(), epochs);
  PretrainResult r = pretrain_classifier(classifier_arch_from_string(arch), train, cfg);
  std::printf("plain accuracy on the training subset: %.4f\n", r.plain_accuracy);
  save_classifier(out, r.clf, r.plain_accuracy);
  std::printf("saved classifier checkpoint: %s\n", out.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::string& classifier_path) {
  const std::string text = read_text_file(config_path);
  ExperimentConfig exp;
  // accept either a bare TrainingConfig document or a full experiment file
  if (text.find("\"training\"") != std::string::npos)
    exp = ExperimentConfig::from_json(text);
  else
    exp.training = TrainingConfig::from_json(text);

  LoadedClassifier lc = load_classifier(classifier_path);
  std::printf("classifier %s (plain accuracy %.4f)\n", lc.clf.arch.c_str(),
              lc.plain_accuracy);

  DatasetSplit train_split = load_split(data_dir, "train", exp.subset_size, exp.data_seed);
  NetworkSpec obf_spec = exp.obfuscator_spec_json.empty()
                             ? default_obfuscator_spec()
                             : spec_from_json(exp.obfuscator_spec_json);
  NetworkSpec deobf_spec = exp.deobfuscator_spec_json.empty()
                               ? obf_spec
                               : spec_from_json(exp.deobfuscator_spec_json);

  std::printf("training obfuscator (%lld params) for %d epochs on %d images, lambda=%.3f\n",
              static_cast<long long>(count_params(obf_spec)), exp.training.epochs,
              train_split.size(), exp.training.lambda);
  TrainResult r = train(obf_spec, deobf_spec, lc.clf, train_split, exp.training, out_dir);
  const LossRecord& last = r.history.back();
  std::printf("final step: L_c=%.4f L_r=%.6f obf_obj=%.4f\n", last.L_c, last.L_r,
              last.obf_objective);
  std::printf("checkpoint: %s\n", r.checkpoint_path.c_str());
  return 0;
}

int cmd_evaluate(const std::string& data_dir, const std::string& classifier_path,
                 const std::string& obf_path, const std::string& split, int subset,
                 std::uint64_t seed) {
  LoadedClassifier lc = load_classifier(classifier_path);
  DatasetSplit data = load_split(data_dir, split, subset, seed);
  const double plain = evaluate_accuracy(lc.clf, data);
  std::printf("plain accuracy (%s, %d images): %.4f\n", split.c_str(), data.size(), plain);
  if (!obf_path.empty()) {
    NetworkHandle obf = obfuscator_from_checkpoint(obf_path);
    const double obfd = evaluate_accuracy(lc.clf, data, &obf);
    std::printf("obfuscated accuracy: %.4f (drop %.2f points)\n", obfd,
                100.0 * (plain - obfd));
  }
  return 0;
}

int cmd_cost(const std::vector<std::string>& archs, const std::string& spec_path,
             int mac_factor) {
  NetworkSpec spec =
      spec_path.empty() ? default_obfuscator_spec() : spec_from_json(read_text_file(spec_path));
  NetworkHandle obf = build_obfuscator(spec);
  std::printf("obfuscator: %lld params, %lld flops (mac factor %d)\n",
              static_cast<long long>(count_params(spec)),
              static_cast<long long>(count_flops(spec, mac_factor)), mac_factor);
  std::printf("%-12s %14s %16s %10s %10s\n", "classifier", "params", "flops", "param%",
              "flop%");
  for (const auto& name : archs) {
    NetworkHandle clf = build_classifier(name, 10);
    CostReport r = cost_report(obf, clf, {3, 32, 32}, mac_factor);
    std::printf("%-12s %14lld %16lld %9.2f%% %9.2f%%\n", name.c_str(),
                static_cast<long long>(count_params(clf)),
                static_cast<long long>(count_flops(clf, {3, 32, 32}, mac_factor)),
                r.params_ratio, r.flops_ratio);
  }
  return 0;
}

int cmd_transfer(const std::string& data_dir, const std::vector<std::string>& obf_args,
                 const std::vector<std::string>& clf_args, const std::string& split,
                 int subset, std::uint64_t seed, const std::string& out_json) {
  auto parse_kv = [](const std::string& s) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw Error("expected NAME=PATH, got " + s);
    return std::pair(s.substr(0, eq), s.substr(eq + 1));
  };
  std::map<std::string, NetworkHandle> obfs, clfs;
  for (const auto& a : obf_args) {
    auto [name, path] = parse_kv(a);
    obfs.emplace(name, obfuscator_from_checkpoint(path));
  }
  for (const auto& a : clf_args) {
    auto [name, path] = parse_kv(a);
    clfs.emplace(name, load_classifier(path).clf);
  }
  DatasetSplit data = load_split(data_dir, split, subset, seed);

  std::map<std::string, const NetworkHandle*> obf_ptrs, clf_ptrs;
  for (auto& [k, v] : obfs) obf_ptrs[k] = &v;
  for (auto& [k, v] : clfs) clf_ptrs[k] = &v;
  TransferMatrix m = transfer_matrix(obf_ptrs, clf_ptrs, data);

  std::printf("%-16s", "trained\\tested");
  for (const auto& c : m.tested_on) std::printf(" %12s", c.c_str());
  std::printf("\n");
  for (std::size_t i = 0; i < m.trained_on.size(); ++i) {
    std::printf("%-16s", m.trained_on[i].c_str());
    for (double v : m.accuracy[i]) std::printf(" %11.2f%%", 100.0 * v);
    std::printf("\n");
  }
  if (!out_json.empty()) {
    std::ofstream out(out_json);
    out << m.to_json() << '\n';
    std::printf("wrote %s\n", out_json.c_str());
  }
  return 0;
}

int cmd_grid(const std::string& data_dir, const std::string& ckpt_path,
             const std::string& out_path, int count, const std::string& split) {
  TrainingCheckpoint ckpt = load_training_checkpoint(ckpt_path);
  Cifar10 ds = load_cifar10(data_dir);
  DatasetSplit data = pick_split(ds, split);
  if (count > data.size()) count = data.size();
  Tensor originals = data.images.slice_batch(0, count);
  Tensor obfuscated = infer(ckpt.obf, originals);
  Tensor reconstructed = infer(ckpt.deobf, obfuscated);
  export_grid(originals, obfuscated, reconstructed, out_path);
  std::printf("wrote %d-row original/obfuscated/reconstructed grid: %s\n", count,
              out_path.c_str());
  return 0;
}

ClassifierServer* g_active_server = nullptr;

int cmd_serve(const std::string& ckpt_path, const std::string& bind) {
  LoadedClassifier lc = load_classifier(ckpt_path);
  auto [host, port] = parse_bind(bind);
  ClassifierServer server(lc.clf);
  server.start(host, port);
  std::printf("serving %s on %s:%d (ctrl-c to stop)\n", lc.clf.arch.c_str(), host.c_str(),
              server.port());
  std::fflush(stdout);
  g_active_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_active_server) g_active_server->stop();
    std::exit(0);
  });
  for (;;) std::this_thread::sleep_for(std::chrono::seconds(3600));
  return 0;
}

int cmd_classify(const std::string& image_path, const std::string& obf_path,
                 const std::string& remote) {
  Tensor image = png_to_batch(image_path);
  NetworkHandle obf = obfuscator_from_checkpoint(obf_path);
  auto [host, port] = parse_bind(remote);
  ClassifyResult r = edge_classify(image, obf, host, port);
  std::printf("class %d\n", r.class_id);
  for (std::size_t k = 0; k < r.probabilities.size(); ++k)
    std::printf("  p[%zu] = %.4f\n", k, r.probabilities[k]);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"image obfuscation training and offloaded classification"};
  app.require_subcommand(1);

  // data
  auto* data = app.add_subcommand("data", "dataset management");
  data->require_subcommand(1);
  std::string data_out = "data", data_root = "data";
  std::uint64_t synth_seed = 1234;
  auto* synth = data->add_subcommand("synth", "generate a synthetic corpus in the standard layout");
  synth->add_option("--out", data_out, "output directory");
  synth->add_option("--seed", synth_seed, "generator seed");
  auto* verify = data->add_subcommand("verify", "validate files and checksums");
  verify->add_option("--root", data_root, "dataset directory");
  auto* fetch = data->add_subcommand("fetch", "check presence; optionally synthesize");
  bool fetch_synth = false;
  fetch->add_option("--root", data_root, "dataset directory");
  fetch->add_flag("--synthesize", fetch_synth, "generate a synthetic corpus when missing");
  fetch->add_option("--seed", synth_seed, "generator seed");

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "train and freeze a plain classifier");
  std::string pre_data, pre_arch = "small_cnn", pre_out = "classifier.ckpt";
  int pre_classes = 10, pre_subset = 0, pre_epochs = 30, pre_batch = 64;
  double pre_lr = 0.001;
  std::uint64_t pre_seed = 1;
  pretrain->add_option("--data", pre_data, "dataset directory")->required();
  pretrain->add_option("--arch", pre_arch, "vgg19|resnet18|resnet50|googlenet|small_cnn");
  pretrain->add_option("--classes", pre_classes, "number of classes");
  pretrain->add_option("--subset", pre_subset, "stratified subset size (0 = full)");
  pretrain->add_option("--epochs", pre_epochs, "epochs");
  pretrain->add_option("--batch", pre_batch, "batch size");
  pretrain->add_option("--lr", pre_lr, "base learning rate");
  pretrain->add_option("--seed", pre_seed, "seed");
  pretrain->add_option("--out", pre_out, "output checkpoint path");

  // train
  auto* train_cmd = app.add_subcommand("train", "adversarial obfuscator training");
  std::string train_config, train_data, train_out, train_clf;
  train_cmd->add_option("--config", train_config, "training/experiment config (json)")->required();
  train_cmd->add_option("--data", train_data, "dataset directory")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--classifier", train_clf, "frozen classifier checkpoint")->required();

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "top-1 accuracy, optionally through an obfuscator");
  std::string eval_data, eval_clf, eval_obf, eval_split = "test";
  int eval_subset = 0;
  std::uint64_t eval_seed = 7;
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--classifier", eval_clf, "classifier checkpoint")->required();
  eval->add_option("--obfuscator", eval_obf, "training checkpoint or 'identity'");
  eval->add_option("--split", eval_split, "train|test");
  eval->add_option("--subset", eval_subset, "stratified subset size (0 = full)");
  eval->add_option("--seed", eval_seed, "subset seed");

  // cost
  auto* cost = app.add_subcommand("cost", "analytical parameter and FLOP report");
  std::vector<std::string> cost_archs{"vgg19", "resnet18", "resnet50", "googlenet",
                                      "small_cnn"};
  std::string cost_spec;
  int mac_factor = 1;
  cost->add_option("--arch", cost_archs, "reference classifiers");
  cost->add_option("--spec", cost_spec, "obfuscator spec json (default: production spec)");
  cost->add_option("--mac-factor", mac_factor, "MAC-to-FLOP multiplier");

  // transfer
  auto* transfer = app.add_subcommand("transfer", "cross-classifier accuracy grid");
  std::vector<std::string> tr_obfs, tr_clfs;
  std::string tr_data, tr_split = "test", tr_out;
  int tr_subset = 0;
  std::uint64_t tr_seed = 7;
  transfer->add_option("--data", tr_data, "dataset directory")->required();
  transfer->add_option("--obf", tr_obfs, "NAME=TRAIN_CKPT (repeatable)")->required();
  transfer->add_option("--clf", tr_clfs, "NAME=CLF_CKPT (repeatable)")->required();
  transfer->add_option("--split", tr_split, "train|test");
  transfer->add_option("--subset", tr_subset, "stratified subset size (0 = full)");
  transfer->add_option("--seed", tr_seed, "subset seed");
  transfer->add_option("--out", tr_out, "write the matrix as json");

  // grid
  auto* grid = app.add_subcommand("grid", "original/obfuscated/reconstructed image grid");
  std::string grid_data, grid_ckpt, grid_out = "grid.png", grid_split = "test";
  int grid_count = 8;
  grid->add_option("--data", grid_data, "dataset directory")->required();
  grid->add_option("--checkpoint", grid_ckpt, "training checkpoint")->required();
  grid->add_option("--out", grid_out, "output png");
  grid->add_option("--count", grid_count, "rows");
  grid->add_option("--split", grid_split, "train|test");

  // serve / classify
  auto* serve = app.add_subcommand("serve", "run the classification service");
  std::string serve_ckpt, serve_bind = "127.0.0.1:9000";
  serve->add_option("--checkpoint", serve_ckpt, "classifier checkpoint")->required();
  serve->add_option("--bind", serve_bind, "host:port");

  auto* classify = app.add_subcommand("classify", "obfuscate locally, classify remotely");
  std::string cl_image, cl_obf, cl_remote = "127.0.0.1:9000";
  classify->add_option("--image", cl_image, "input png")->required();
  classify->add_option("--obfuscator", cl_obf, "training checkpoint or 'identity'")->required();
  classify->add_option("--remote", cl_remote, "host:port");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_data_synth(data_out, synth_seed);
    if (verify->parsed()) return cmd_data_verify(data_root);
    if (fetch->parsed()) return cmd_data_fetch(data_root, fetch_synth, synth_seed);
    if (pretrain->parsed())
      return cmd_pretrain(pre_data, pre_arch, pre_classes, pre_subset, pre_epochs, pre_batch,
                          pre_lr, pre_seed, pre_out);
    if (train_cmd->parsed()) return cmd_train(train_config, train_data, train_out, train_clf);
    if (eval->parsed())
      return cmd_evaluate(eval_data, eval_clf, eval_obf, eval_split, eval_subset, eval_seed);
    if (cost->parsed()) return cmd_cost(cost_archs, cost_spec, mac_factor);
    if (transfer->parsed())
      return cmd_transfer(tr_data, tr_obfs, tr_clfs, tr_split, tr_subset, tr_seed, tr_out);
    if (grid->parsed()) return cmd_grid(grid_data, grid_ckpt, grid_out, grid_count, grid_split);
    if (serve->parsed()) return cmd_serve(serve_ckpt, serve_bind);
    if (classify->parsed()) return cmd_classify(cl_image, cl_obf, cl_remote);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
