#pragma once

#include <bit>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "config.hpp"
#include "data.hpp"
#include "model.hpp"

namespace mfen {

struct MetricsRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_iou = 0.0;
  double val_dice = 0.0;
  double seconds = 0.0;
};

// ---------------------------------------------------------------------------
// overlap metrics: sigmoid(logit) binarized at threshold, scored per image
// and averaged. Empty-union / empty-sum pairs score 1.0 by convention.
// ---------------------------------------------------------------------------
namespace detail {

struct OverlapCounts {
  long long inter = 0, pred = 0, gt = 0;
};

template <typename S>
OverlapCounts overlap_counts(const Tensor<S>& logits, const Tensor<S>& gt, double threshold,
                             int item) {
  // sigmoid(x) >= t  <=>  x >= logit(t)
  require(threshold > 0.0 && threshold < 1.0, "metrics: threshold must be in (0,1)");
  const S cut = static_cast<S>(std::log(threshold / (1.0 - threshold)));
  OverlapCounts counts;
  const std::size_t per_item = logits.numel() / logits.shape.n;
  const S* lp = logits.data.data() + static_cast<std::size_t>(item) * per_item;
  const S* gp = gt.data.data() + static_cast<std::size_t>(item) * per_item;
  for (std::size_t i = 0; i < per_item; ++i) {
    const bool p = lp[i] >= cut;
    const bool g = gp[i] >= S(0.5);
    counts.inter += (p && g);
    counts.pred += p;
    counts.gt += g;
  }
  return counts;
}

}  // namespace detail

template <typename S>
double iou(const Tensor<S>& pred_logits, const Tensor<S>& gt_mask, double threshold = 0.5) {
  require(pred_logits.shape == gt_mask.shape,
          "iou: shape mismatch " + pred_logits.shape.str() + " vs " + gt_mask.shape.str());
  double acc = 0.0;
  for (int n = 0; n < pred_logits.shape.n; ++n) {
    const auto c = detail::overlap_counts(pred_logits, gt_mask, threshold, n);
    const long long uni = c.pred + c.gt - c.inter;
    acc += uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(uni);
  }
  return acc / pred_logits.shape.n;
}

template <typename S>
double dice(const Tensor<S>& pred_logits, const Tensor<S>& gt_mask, double threshold = 0.5) {
  require(pred_logits.shape == gt_mask.shape,
          "dice: shape mismatch " + pred_logits.shape.str() + " vs " + gt_mask.shape.str());
  double acc = 0.0;
  for (int n = 0; n < pred_logits.shape.n; ++n) {
    const auto c = detail::overlap_counts(pred_logits, gt_mask, threshold, n);
    const long long denom = c.pred + c.gt;
    acc += denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.inter) / static_cast<double>(denom);
  }
  return acc / pred_logits.shape.n;
}

// Forward-only inference over a batch tensor.
template <typename S>
Tensor<S> predict_logits(ModelGraph<S>& graph, const Tensor<S>& images) {
  Tape<S> tape;
  tape.recording = false;
  auto out = graph.forward(tape, tape.leaf(images));
  return out->value;
}

// Deterministic, parameter-preserving evaluation: mean per-image IoU/Dice.
template <typename S>
std::pair<double, double> evaluate(ModelGraph<S>& graph, const Dataset& ds, double threshold,
                                   int batch_size = 16) {
  require(!ds.empty(), "evaluate: dataset is empty");
  double iou_acc = 0.0, dice_acc = 0.0;
  std::size_t start = 0;
  while (start < ds.size()) {
    const std::size_t end = std::min(ds.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const Sample*> members;
    for (std::size_t i = start; i < end; ++i) members.push_back(&ds.samples[i]);
    Batch b = assemble_batch(members);
    Tensor<S> logits = predict_logits(graph, b.images.template cast<S>());
    const Tensor<S> masks = b.masks.template cast<S>();
    for (int n = 0; n < logits.shape.n; ++n) {
      const auto c = detail::overlap_counts(logits, masks, threshold, n);
      const long long uni = c.pred + c.gt - c.inter;
      iou_acc += uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(uni);
      const long long denom = c.pred + c.gt;
      dice_acc += denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.inter) / static_cast<double>(denom);
    }
    start = end;
  }
  return {iou_acc / static_cast<double>(ds.size()), dice_acc / static_cast<double>(ds.size())};
}

// ---------------------------------------------------------------------------
// checkpoints: "MFEN" magic, format version, embedded model config text,
// then (name, shape, little-endian float32 payload) per parameter in
// registration order.
// ---------------------------------------------------------------------------
namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  require(in.gcount() == 4, "checkpoint truncated: " + path);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const ModelGraph<float>& graph, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write checkpoint: " + path);
  out.write("MFEN", 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string cfg_text = model_config_text(graph.arch, graph.config);
  detail::put_u32(out, static_cast<std::uint32_t>(cfg_text.size()));
  out.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(graph.params.size()));
  for (const auto& p : graph.params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put_u32(out, 4);
    const Shape& s = p.value.shape;
    for (int d : {s.n, s.c, s.h, s.w}) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : p.value.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  require(out.good(), "cannot write checkpoint: " + path);
}

// Restores parameter payloads into an existing graph; names and shapes must
// match exactly.
inline void load_checkpoint_into(ModelGraph<float>& graph, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot read checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  require(in.gcount() == 4 && std::memcmp(magic, "MFEN", 4) == 0,
          "not a checkpoint (bad magic): " + path);
  const std::uint32_t version = detail::get_u32(in, path);
  require(version == kCheckpointVersion,
          "checkpoint version mismatch: file has " + std::to_string(version) + ", expected " +
              std::to_string(kCheckpointVersion));
  const std::uint32_t cfg_len = detail::get_u32(in, path);
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), cfg_len);
  require(in.gcount() == static_cast<std::streamsize>(cfg_len), "checkpoint truncated: " + path);
  const std::uint32_t count = detail::get_u32(in, path);
  std::size_t seen = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::get_u32(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    require(in.gcount() == static_cast<std::streamsize>(name_len),
            "checkpoint truncated: " + path);
    const std::uint32_t rank = detail::get_u32(in, path);
    require(rank == 4, "checkpoint parameter " + name + " has unsupported rank " +
                           std::to_string(rank));
    Shape s;
    s.n = static_cast<int>(detail::get_u32(in, path));
    s.c = static_cast<int>(detail::get_u32(in, path));
    s.h = static_cast<int>(detail::get_u32(in, path));
    s.w = static_cast<int>(detail::get_u32(in, path));
    Param<float>* p = graph.params.find(name);
    require(p != nullptr, "checkpoint has unknown parameter name: " + name);
    require(p->value.shape == s, "checkpoint shape mismatch for " + name + ": file has " +
                                     s.str() + ", graph has " + p->value.shape.str());
    for (float& v : p->value.data) v = std::bit_cast<float>(detail::get_u32(in, path));
    ++seen;
  }
  require(seen == graph.params.size(),
          "checkpoint provides " + std::to_string(seen) + " parameters, graph has " +
              std::to_string(graph.params.size()));
}

// Rebuilds the graph from the embedded config, then restores parameters.
inline std::unique_ptr<ModelGraph<float>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot read checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  require(in.gcount() == 4 && std::memcmp(magic, "MFEN", 4) == 0,
          "not a checkpoint (bad magic): " + path);
  const std::uint32_t version = detail::get_u32(in, path);
  require(version == kCheckpointVersion,
          "checkpoint version mismatch: file has " + std::to_string(version) + ", expected " +
              std::to_string(kCheckpointVersion));
  const std::uint32_t cfg_len = detail::get_u32(in, path);
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), cfg_len);
  require(in.gcount() == static_cast<std::streamsize>(cfg_len), "checkpoint truncated: " + path);
  RunConfig rc;
  config_parse_text(rc, cfg_text, path + " (embedded config)");
  auto graph = build_model<float>(rc.arch, rc.model, 0);
  load_checkpoint_into(*graph, path);
  return graph;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

// Returning false from the callback stops training after the current epoch.
using EpochCallback = std::function<bool(const MetricsRecord&)>;

inline std::string history_csv(const std::vector<MetricsRecord>& records) {
  std::ostringstream os;
  os << "epoch,loss,iou,dice,seconds\n";
  for (const auto& r : records) {
    os << r.epoch << "," << cfg::fmt(r.train_loss) << "," << cfg::fmt(r.val_iou) << ","
       << cfg::fmt(r.val_dice) << "," << cfg::fmt(r.seconds) << "\n";
  }
  return os.str();
}

// One full training run: per epoch, shuffle/batch/augment, BCE forward,
// backward, Adam step; validation every eval_every epochs; best-val-IoU
// checkpoint plus final checkpoint and history when out_dir is given.
inline std::vector<MetricsRecord> train(ModelGraph<float>& graph, const Dataset& train_ds,
                                        const Dataset& val_ds, const TrainConfig& cfg,
                                        const AugmentOptions& aug_opt = {},
                                        const std::string& out_dir = "",
                                        const EpochCallback& callback = nullptr) {
  cfg.validate();
  require(!train_ds.empty() && !val_ds.empty(), "train: datasets must be non-empty");
  namespace fs = std::filesystem;
  std::string best_path, last_path;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    best_path = (fs::path(out_dir) / "best.mfen").string();
    last_path = (fs::path(out_dir) / "last.mfen").string();
  }

  Batcher batcher(train_ds, cfg.batch_size, cfg.seed);
  AdamState adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, 0};
  std::vector<MetricsRecord> records;
  double best_iou = -1.0;
  double last_iou = 0.0, last_dice = 0.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batches = batcher.epoch(epoch, cfg.augment, aug_opt);
    double loss_acc = 0.0;
    std::size_t sample_count = 0;
    int batch_index = 0;
    for (const auto& batch : batches) {
      double loss;
      try {
        Tape<float> tape;
        auto x = tape.leaf(batch.images);
        auto logits = graph.forward(tape, x);
        loss = ops::bce_with_logits(tape, logits, batch.masks);
        tape.backward();
      } catch (const std::exception& e) {
        throw std::runtime_error("training aborted at epoch " + std::to_string(epoch + 1) +
                                 ", batch " + std::to_string(batch_index + 1) + ": " + e.what() +
                                 (best_path.empty() ? "" : "; last checkpoint kept at " + best_path));
      }
      adam_step(graph.params, adam);
      loss_acc += loss * batch.images.shape.n;
      sample_count += batch.images.shape.n;
      ++batch_index;
    }

    MetricsRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_acc / static_cast<double>(sample_count);
    if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
      auto [vi, vd] = evaluate(graph, val_ds, cfg.threshold, cfg.batch_size);
      last_iou = vi;
      last_dice = vd;
      if (vi > best_iou) {
        best_iou = vi;
        if (!best_path.empty()) save_checkpoint(graph, best_path);
      }
    }
    rec.val_iou = last_iou;
    rec.val_dice = last_dice;
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    records.push_back(rec);
    if (callback && !callback(rec)) break;
  }

  if (!out_dir.empty()) {
    save_checkpoint(graph, last_path);
    std::ofstream hist((fs::path(out_dir) / "history.csv").string());
    require(hist.good(), "cannot write history file in " + out_dir);
    hist << history_csv(records);
  }
  return records;
}

}  // namespace mfen
