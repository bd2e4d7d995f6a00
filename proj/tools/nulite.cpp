// nulite command-line front end: dataset conversion, training, inference,
// evaluation, complexity profiling and overlay rendering.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "nulite/config.hpp"
#include "nulite/data.hpp"
#include "nulite/metrics.hpp"
#include "nulite/profiler.hpp"
#include "nulite/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

nulite::RunConfig load_run_config(const std::string& config_path) {
  if (config_path.empty()) return nulite::RunConfig::from(nulite::Config());
  return nulite::RunConfig::from(nulite::Config::load(config_path));
}

void write_detections(const std::string& path, const std::vector<nulite::TypedNucleus>& nuclei,
                      const std::vector<std::string>& class_names) {
  std::ofstream os(path);
  for (const auto& n : nuclei) {
    json rec{{"id", n.id},
             {"class", n.class_id},
             {"prob", n.class_prob},
             {"centroid", {n.centroid_r, n.centroid_c}},
             {"bbox", {n.r0, n.c0, n.r1, n.c1}},
             {"area", n.area_px}};
    if (n.class_id >= 0 && size_t(n.class_id) < class_names.size())
      rec["class_name"] = class_names[size_t(n.class_id)];
    os << rec.dump() << "\n";
  }
}

std::vector<nulite::TypedNucleus> read_detections(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open detections: " + path);
  std::vector<nulite::TypedNucleus> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    nulite::TypedNucleus n;
    n.id = rec.at("id").get<int32_t>();
    n.class_id = rec.at("class").get<int>();
    n.class_prob = rec.at("prob").get<float>();
    n.centroid_r = rec.at("centroid")[0].get<double>();
    n.centroid_c = rec.at("centroid")[1].get<double>();
    n.r0 = rec.at("bbox")[0].get<int64_t>();
    n.c0 = rec.at("bbox")[1].get<int64_t>();
    n.r1 = rec.at("bbox")[2].get<int64_t>();
    n.c1 = rec.at("bbox")[3].get<int64_t>();
    n.area_px = rec.at("area").get<int64_t>();
    out.push_back(n);
  }
  return out;
}

nulite::ImageU16 instance_to_u16(const nulite::InstanceMap& m) {
  nulite::ImageU16 img;
  img.height = m.height;
  img.width = m.width;
  img.data.resize(m.ids.size());
  for (size_t i = 0; i < m.ids.size(); ++i) img.data[i] = uint16_t(m.ids[i]);
  return img;
}

nulite::InstanceMap u16_to_instance(const nulite::ImageU16& img) {
  nulite::InstanceMap m(img.height, img.width);
  for (size_t i = 0; i < img.data.size(); ++i) m.ids[i] = int32_t(img.data[i]);
  return m;
}

// Paints instance boundaries onto the RGB image, colored by class.
nulite::ImageU8 render_overlay(const nulite::ImageU8& rgb, const nulite::InstanceMap& inst,
                               const std::vector<nulite::TypedNucleus>& nuclei) {
  static const uint8_t palette[6][3] = {{255, 255, 255}, {255, 0, 0},   {0, 255, 0},
                                        {0, 128, 255},   {255, 255, 0}, {255, 0, 255}};
  std::map<int32_t, int> cls;
  for (const auto& n : nuclei) cls[n.id] = n.class_id;
  nulite::ImageU8 out = rgb;
  const int64_t H = inst.height, W = inst.width;
  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c) {
      int32_t id = inst.at(r, c);
      if (id <= 0) continue;
      bool boundary = false;
      for (int dr = -1; dr <= 1 && !boundary; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          int64_t rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= H || cc < 0 || cc >= W || inst.at(rr, cc) != id) {
            boundary = true;
            break;
          }
        }
      if (!boundary) continue;
      int k = cls.count(id) ? cls[id] % 6 : 0;
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = palette[k][ch];
    }
  return out;
}

int cmd_convert(const std::string& pannuke_dir, const std::string& out_root, int fold) {
  nulite::convert_pannuke_fold(pannuke_dir, out_root, fold, &std::cerr);
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_root,
              const std::string& out_dir, int64_t epochs, int64_t batch, double lr,
              const std::string& variant, uint64_t seed) {
  nulite::RunConfig rc = load_run_config(config_path);
  if (!data_root.empty()) rc.data_root = data_root;
  if (!variant.empty()) rc.network = nulite::network_variant(
      variant, rc.network.num_nuclei_classes, rc.network.num_tissue_classes);
  if (epochs > 0) rc.train.epochs = epochs;
  if (batch > 0) rc.train.batch_size = batch;
  if (lr > 0) rc.train.lr = float(lr);
  rc.train.seed = seed;
  if (rc.data_root.empty()) {
    std::cerr << "train: no dataset root configured\n";
    return 2;
  }
  auto dataset = nulite::load_dataset(rc.data_root, rc.data_fold,
                                      int(rc.network.num_nuclei_classes), &std::cerr);
  if (dataset.empty()) {
    std::cerr << "train: dataset is empty\n";
    return 2;
  }
  fs::create_directories(out_dir);
  std::ofstream log(out_dir + "/train_log.jsonl");
  nulite::Network net(rc.network);
  net.init(seed);
  nulite::TrainCallbacks cb;
  cb.on_step = [&log](const json& rec) { log << rec.dump() << "\n"; };
  cb.on_epoch = [](const nulite::EpochStats& es) {
    std::cerr << "epoch " << es.epoch << "  lr " << es.lr << "  mean loss " << es.mean_total
              << "\n";
  };
  nulite::train(net, dataset, rc.train, out_dir, cb);
  return 0;
}

int cmd_infer(const std::string& config_path, const std::string& model,
              const std::string& input, const std::string& output, int64_t tile,
              int64_t overlap, bool overlay) {
  nulite::RunConfig rc = load_run_config(config_path);
  nulite::LoadedCheckpoint ck = nulite::load_checkpoint(model);
  if (!ck.network.reparameterized())
    std::cerr << "nulite: warning: checkpoint is not reparameterized; inference will be "
                 "slower\n";
  fs::create_directories(output);

  std::vector<fs::path> inputs;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input))
      if (e.path().extension() == ".png") inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
  } else {
    inputs.push_back(input);
  }
  if (inputs.empty()) {
    std::cerr << "infer: no input images\n";
    return 2;
  }

  for (const auto& path : inputs) {
    nulite::ImageU8 img = nulite::read_png_rgb8(path.string());
    std::string id = path.stem().string();
    nulite::InstanceMap inst;
    std::vector<nulite::TypedNucleus> nuclei;
    if (img.height > tile || img.width > tile) {
      nulite::TileGrid grid = nulite::plan_tiles(img.height, img.width, tile, overlap);
      std::tie(inst, nuclei) =
          nulite::infer_tiled(ck.network, img, grid, rc.postprocess, ck.norm, &std::cerr);
    } else {
      std::tie(inst, nuclei) = nulite::infer_direct(ck.network, img, rc.postprocess, ck.norm);
    }
    nulite::write_png_gray16(output + "/" + id + "_inst.png", instance_to_u16(inst));
    write_detections(output + "/" + id + "_detections.jsonl", nuclei,
                     nulite::pannuke_class_names());
    if (overlay)
      nulite::write_png_rgb8(output + "/" + id + "_overlay.png",
                             render_overlay(img, inst, nuclei));
    std::cerr << id << ": " << nuclei.size() << " nuclei\n";
  }
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& pred_dir,
             const std::string& gt_root, const std::string& out_path, int num_classes) {
  nulite::RunConfig rc = load_run_config(config_path);
  auto manifest = nulite::read_manifest(gt_root);
  if (manifest.empty()) {
    std::cerr << "eval: empty ground-truth manifest\n";
    return 2;
  }
  std::vector<nulite::ImageEval> evals;
  for (const auto& row : manifest) {
    nulite::AnnotatedImage gt =
        nulite::load_annotated_image(gt_root, row, num_classes, &std::cerr);
    nulite::InstanceMap pred =
        u16_to_instance(nulite::read_png_gray16(pred_dir + "/" + row.id + "_inst.png"));
    auto dets = read_detections(pred_dir + "/" + row.id + "_detections.jsonl");
    std::map<int32_t, int> cls;
    for (const auto& d : dets) cls[d.id] = d.class_id;
    std::vector<int> pred_types(pred.ids.size(), 0);
    for (size_t i = 0; i < pred.ids.size(); ++i)
      if (pred.ids[i] > 0 && cls.count(pred.ids[i])) pred_types[i] = cls[pred.ids[i]];
    evals.push_back(nulite::evaluate_image(gt.inst, gt.type_map, pred, pred_types, num_classes,
                                           rc.eval_radius_px, row.tissue));
  }
  nulite::MetricsReport rep = nulite::aggregate_report(evals, num_classes);

  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "images = " << rep.images << "\n";
  os << "binary.DQ = " << rep.binary.dq << "\n";
  os << "binary.SQ = " << rep.binary.sq << "\n";
  os << "binary.PQ = " << rep.binary.pq << "\n";
  os << "bPQ = " << rep.bpq << "\n";
  os << "mPQ = " << rep.mpq << "\n";
  os << "detection.P = " << rep.detection.precision << "\n";
  os << "detection.R = " << rep.detection.recall << "\n";
  os << "detection.F1 = " << rep.detection.f1 << "\n";
  const auto& names = nulite::pannuke_class_names();
  for (int c = 1; c < num_classes; ++c) {
    std::string name = size_t(c) < names.size() ? names[size_t(c)] : std::to_string(c);
    if (rep.class_pq_mean[size_t(c)])
      os << "class." << name << ".PQ = " << *rep.class_pq_mean[size_t(c)] << "\n";
    os << "class." << name << ".P = " << rep.per_class_scores[size_t(c)].precision << "\n";
    os << "class." << name << ".R = " << rep.per_class_scores[size_t(c)].recall << "\n";
    os << "class." << name << ".F1 = " << rep.per_class_scores[size_t(c)].f1 << "\n";
  }
  const auto& tissues = nulite::pannuke_tissue_names();
  for (const auto& t : rep.tissues) {
    std::string name =
        size_t(t.tissue) < tissues.size() ? tissues[size_t(t.tissue)] : std::to_string(t.tissue);
    os << "tissue." << name << ".mPQ = " << t.mpq << "\n";
    os << "tissue." << name << ".bPQ = " << t.bpq << "\n";
  }
  os << "tissue.Average.mPQ = " << rep.tissue_mpq_avg << "\n";
  os << "tissue.Average.bPQ = " << rep.tissue_bpq_avg << "\n";
  os << "tissue.STD.mPQ = " << rep.tissue_mpq_std << "\n";
  os << "tissue.STD.bPQ = " << rep.tissue_bpq_std << "\n";

  if (out_path.empty()) {
    std::cout << os.str();
  } else {
    std::ofstream f(out_path);
    f << os.str();
    std::cout << "report written to " << out_path << "\n";
  }
  return 0;
}

int cmd_profile(const std::string& variant, int64_t input_size, bool reparameterized,
                bool latency, const std::string& compare, uint64_t seed) {
  nulite::NetworkConfig cfg = nulite::network_variant(variant);
  nulite::Network net(cfg);
  net.init(seed);
  if (reparameterized) {
    // populate normalization statistics with one calibration pass
    nulite::Rng rng(seed + 1);
    nulite::Tensor x({1, 3, 64, 64});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = nulite::rand_uniform(rng, -1.f, 1.f);
    net.forward(nulite::make_var(x), true);
    net.reparameterize();
  }
  nulite::ComplexityReport rep = nulite::profile_network(net, variant, latency);
  std::cout << nulite::format_report(rep);
  if (input_size != 256 && input_size != 1024) {
    std::cout << "gflops_" << input_size << " = " << std::fixed << std::setprecision(2)
              << nulite::count_gflops(net, input_size) << "\n";
  }
  if (!compare.empty()) {
    std::string ref_name = compare == "cellvit256"   ? "CellViT-256"
                           : compare == "cellvit-sam-h" ? "CellViT-SAM-H"
                                                        : compare;
    const auto& ref = nulite::reference_report(ref_name);
    nulite::SpeedupRow s = nulite::speedup_table(ref, rep);
    std::cout << "speedup of this model vs " << ref.model
              << " (literature constants):" << "\n";
    std::cout << std::fixed << std::setprecision(2);
    std::cout << "  params x" << s.params << "\n";
    std::cout << "  gflops@256 x" << s.gflops_256 << "\n";
    std::cout << "  gflops@1024 x" << s.gflops_1024 << "\n";
    std::cout << "  size@256 x" << s.size_256 << "\n";
    std::cout << "  size@1024 x" << s.size_1024 << "\n";
  }
  return 0;
}

int cmd_overlay(const std::string& image, const std::string& inst_path,
                const std::string& detections, const std::string& out) {
  nulite::ImageU8 rgb = nulite::read_png_rgb8(image);
  nulite::InstanceMap inst = u16_to_instance(nulite::read_png_gray16(inst_path));
  std::vector<nulite::TypedNucleus> dets;
  if (!detections.empty()) dets = read_detections(detections);
  nulite::write_png_rgb8(out, render_overlay(rgb, inst, dets));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nulite: nuclei instance segmentation and classification"};
  app.require_subcommand(1);

  std::string config_path;
  uint64_t seed = 0;
  app.add_option("--config", config_path, "config file (TOML-style sections)");
  app.add_option("--seed", seed, "seed fixing all stochastic behavior");

  auto* conv = app.add_subcommand("convert-dataset", "convert a PanNuke fold directory");
  std::string pannuke_dir, out_root;
  int fold = 0;
  conv->add_option("--pannuke", pannuke_dir, "directory with images.npy/masks.npy/types.npy")
      ->required();
  conv->add_option("--out", out_root, "output dataset root")->required();
  conv->add_option("--fold", fold, "fold id recorded in the manifest");

  auto* tr = app.add_subcommand("train", "train a model");
  std::string data_root, train_out = "runs/train", variant;
  int64_t epochs = 0, batch = 0;
  double lr = 0;
  tr->add_option("--data", data_root, "dataset root");
  tr->add_option("--out", train_out, "output directory (checkpoints + log)");
  tr->add_option("--epochs", epochs, "override epochs");
  tr->add_option("--batch", batch, "override batch size");
  tr->add_option("--lr", lr, "override learning rate");
  tr->add_option("--variant", variant, "network preset (NuLite-T/M/H or FastViT name)");

  auto* inf = app.add_subcommand("infer", "run inference on PNG images");
  std::string model, input, output = "runs/infer";
  int64_t tile = 256, overlap = 64;
  bool overlay_flag = false;
  inf->add_option("--model", model, "checkpoint file")->required();
  inf->add_option("--input", input, "input PNG file or directory")->required();
  inf->add_option("--output", output, "output directory");
  inf->add_option("--tile", tile, "tile size (divisible by 32)");
  inf->add_option("--overlap", overlap, "tile overlap in pixels");
  inf->add_flag("--overlay", overlay_flag, "also write overlay images");

  auto* ev = app.add_subcommand("eval", "evaluate predictions against ground truth");
  std::string pred_dir, gt_root, report_out;
  int num_classes = 6;
  ev->add_option("--pred", pred_dir, "directory with <id>_inst.png + <id>_detections.jsonl")
      ->required();
  ev->add_option("--gt", gt_root, "ground-truth dataset root")->required();
  ev->add_option("--out", report_out, "report file (stdout when omitted)");
  ev->add_option("--classes", num_classes, "number of nucleus classes incl. background");

  auto* prof = app.add_subcommand("profile", "static complexity report");
  std::string prof_variant = "NuLite-T", compare;
  int64_t input_size = 256;
  bool reparam = true, latency = false;
  prof->add_option("--variant", prof_variant, "network preset");
  prof->add_option("--input-size", input_size, "extra input size to report");
  prof->add_flag("--latency,!--no-latency", latency, "measure wall-clock latency");
  prof->add_flag("--reparameterized,!--no-reparameterized", reparam,
                 "profile the fused inference form");
  prof->add_option("--compare", compare, "cellvit256 or cellvit-sam-h");

  auto* ov = app.add_subcommand("overlay", "render instance boundaries onto an image");
  std::string ov_image, ov_inst, ov_det, ov_out = "overlay.png";
  ov->add_option("--image", ov_image, "RGB PNG")->required();
  ov->add_option("--inst", ov_inst, "16-bit instance label PNG")->required();
  ov->add_option("--detections", ov_det, "detections JSONL (for class colors)");
  ov->add_option("--out", ov_out, "output PNG");

  CLI11_PARSE(app, argc, argv);

  try {
    if (conv->parsed()) return cmd_convert(pannuke_dir, out_root, fold);
    if (tr->parsed())
      return cmd_train(config_path, data_root, train_out, epochs, batch, lr, variant, seed);
    if (inf->parsed())
      return cmd_infer(config_path, model, input, output, tile, overlap, overlay_flag);
    if (ev->parsed()) return cmd_eval(config_path, pred_dir, gt_root, report_out, num_classes);
    if (prof->parsed())
      return cmd_profile(prof_variant, input_size, reparam, latency, compare, seed);
    if (ov->parsed()) return cmd_overlay(ov_image, ov_inst, ov_det, ov_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
