#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "image.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace mfen {

// One image/mask pair. Image values live in [0,1]; the mask is strictly
// binary at every pipeline point.
struct Sample {
  Tensor<float> image;  // 1 x 3 x H x W
  Tensor<float> mask;   // 1 x 1 x H x W, values in {0,1}
  std::string id;
};

struct Dataset {
  std::vector<Sample> samples;
  std::string split_tag;  // train / val / test / full

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

inline void binarize_mask(Tensor<float>& m, float threshold = 0.5f) {
  for (float& v : m.data) v = v >= threshold ? 1.0f : 0.0f;
}

inline void validate_sample(const Sample& s) {
  require(s.image.shape.h == s.mask.shape.h && s.image.shape.w == s.mask.shape.w,
          "sample " + s.id + ": image and mask spatial dims differ");
  for (float v : s.mask.data)
    require(v == 0.0f || v == 1.0f, "sample " + s.id + ": mask is not binary");
}

// ---------------------------------------------------------------------------
// directory ingestion: root/images/*.ppm paired with root/masks/*.pgm by
// basename. Images resize bilinearly, masks nearest + threshold.
// ---------------------------------------------------------------------------
inline Dataset load_dataset(const std::string& dir, int size = 256) {
  namespace fs = std::filesystem;
  require(size >= 1, "load_dataset: size must be >= 1");
  const fs::path images_dir = fs::path(dir) / "images";
  const fs::path masks_dir = fs::path(dir) / "masks";
  require(fs::is_directory(images_dir), "missing directory: " + images_dir.string());
  require(fs::is_directory(masks_dir), "missing directory: " + masks_dir.string());

  std::map<std::string, fs::path> images, masks;  // map keeps basename order stable
  for (const auto& e : fs::directory_iterator(images_dir))
    if (e.is_regular_file() && (e.path().extension() == ".ppm" || e.path().extension() == ".pgm"))
      images[e.path().stem().string()] = e.path();
  for (const auto& e : fs::directory_iterator(masks_dir))
    if (e.is_regular_file() && e.path().extension() == ".pgm")
      masks[e.path().stem().string()] = e.path();

  std::string orphans;
  for (const auto& [base, _] : images)
    if (!masks.count(base)) orphans += " " + base;
  for (const auto& [base, _] : masks)
    if (!images.count(base)) orphans += " " + base;
  require(orphans.empty(), "unmatched image/mask basenames:" + orphans);
  require(!images.empty(), "no samples found in " + dir);

  Dataset ds;
  ds.split_tag = "full";
  for (const auto& [base, img_path] : images) {
    Sample s;
    s.id = base;
    Tensor<float> img = image_to_tensor(read_pnm(img_path.string()));
    if (img.shape.c == 1) {  // grayscale input replicated to 3 channels
      Tensor<float> rgb(Shape{1, 3, img.shape.h, img.shape.w});
      for (int c = 0; c < 3; ++c)
        std::copy_n(img.plane(0, 0), static_cast<std::size_t>(img.shape.h) * img.shape.w,
                    rgb.plane(0, c));
      img = std::move(rgb);
    }
    require(img.shape.c == 3, "image " + img_path.string() + " must have 1 or 3 channels");
    s.image = resize_bilinear(img, size, size);
    Tensor<float> m = image_to_tensor(read_pnm(masks[base].string()));
    require(m.shape.c == 1, "mask for " + base + " must be grayscale");
    s.mask = resize_nearest_image(m, size, size);
    binarize_mask(s.mask);
    validate_sample(s);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// Seeded shuffle then prefix split; disjoint and exhaustive.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double train_frac,
                                         std::uint64_t seed) {
  require(!ds.empty(), "split: dataset is empty");
  require(train_frac > 0.0 && train_frac <= 1.0, "split: train_frac must be in (0,1]");
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x73706c69ULL));
  rng.shuffle(order);
  const std::size_t n_train = static_cast<std::size_t>(ds.size() * train_frac);
  Dataset train, val;
  train.split_tag = "train";
  val.split_tag = "val";
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_train ? train : val).samples.push_back(ds.samples[order[i]]);
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// augmentation: horizontal flip and random crop-with-resize, with identical
// geometry on image and mask.
// ---------------------------------------------------------------------------
inline Sample hflip(const Sample& s) {
  Sample out;
  out.id = s.id;
  out.image = Tensor<float>(s.image.shape);
  out.mask = Tensor<float>(s.mask.shape);
  auto flip = [](const Tensor<float>& src, Tensor<float>& dst) {
    const Shape sh = src.shape;
    for (int c = 0; c < sh.c; ++c)
      for (int y = 0; y < sh.h; ++y)
        for (int x = 0; x < sh.w; ++x) dst.at(0, c, y, x) = src.at(0, c, y, sh.w - 1 - x);
  };
  flip(s.image, out.image);
  flip(s.mask, out.mask);
  return out;
}

// Crops a crop_frac-sized window at the given fractional offsets and resizes
// back to the original size (image bilinear, mask nearest + threshold).
inline Sample crop_resize(const Sample& s, double crop_frac, double off_x, double off_y) {
  require(crop_frac > 0.0 && crop_frac <= 1.0, "crop_resize: crop_frac must be in (0,1]");
  const int H = s.image.shape.h, W = s.image.shape.w;
  const int ch = std::max(1, static_cast<int>(std::lround(H * crop_frac)));
  const int cw = std::max(1, static_cast<int>(std::lround(W * crop_frac)));
  const int y0 = static_cast<int>(std::lround((H - ch) * off_y));
  const int x0 = static_cast<int>(std::lround((W - cw) * off_x));
  auto crop = [&](const Tensor<float>& src) {
    Tensor<float> out(Shape{1, src.shape.c, ch, cw});
    for (int c = 0; c < src.shape.c; ++c)
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) out.at(0, c, y, x) = src.at(0, c, y0 + y, x0 + x);
    return out;
  };
  Sample out;
  out.id = s.id;
  out.image = resize_bilinear(crop(s.image), H, W);
  out.mask = resize_nearest_image(crop(s.mask), H, W);
  binarize_mask(out.mask);
  return out;
}

struct AugmentOptions {
  bool hflip = true;
  double crop_frac = 0.875;
};

inline Sample augment(const Sample& s, Rng& rng, const AugmentOptions& opt = {}) {
  Sample out = s;
  if (opt.hflip && rng.coin(0.5)) out = hflip(out);
  const double off_x = rng.uniform01();
  const double off_y = rng.uniform01();
  if (opt.crop_frac < 1.0) out = crop_resize(out, opt.crop_frac, off_x, off_y);
  return out;
}

// ---------------------------------------------------------------------------
// synthetic dataset: 1-3 filled ellipses on a textured background; the mask
// is the exact analytic ellipse union. Fully determined by (n, size, seed).
// ---------------------------------------------------------------------------
struct SynthEllipse {
  double cx, cy, a, b, theta;
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double u = (dx * ct + dy * st) / a;
    const double v = (-dx * st + dy * ct) / b;
    return u * u + v * v <= 1.0;
  }
};

inline Dataset synth_dataset(int n, int size, std::uint64_t seed) {
  require(n >= 1, "synth_dataset: n must be >= 1");
  require(size >= 16 && size % 16 == 0, "synth_dataset: size must be a positive multiple of 16");
  Dataset ds;
  ds.split_tag = "full";
  Rng rng(mix_seed(seed, 0x73796e74ULL));
  for (int i = 0; i < n; ++i) {
    Sample s;
    s.id = "synth-" + std::to_string(i);
    for (int attempt = 0;; ++attempt) {
      require(attempt < 64, "synth_dataset: rejection sampling failed to place ellipses");
      const int count = 1 + static_cast<int>(rng.below(3));
      std::vector<SynthEllipse> ellipses;
      for (int e = 0; e < count; ++e) {
        SynthEllipse el;
        el.cx = rng.uniform(0.2, 0.8) * size;
        el.cy = rng.uniform(0.2, 0.8) * size;
        el.a = rng.uniform(0.10, 0.30) * size;
        el.b = rng.uniform(0.10, 0.30) * size;
        el.theta = rng.uniform(0.0, 3.14159265358979323846);
        ellipses.push_back(el);
      }
      Tensor<float> mask(Shape{1, 1, size, size});
      std::size_t fg = 0;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          bool inside = false;
          for (const auto& el : ellipses)
            if (el.contains(x, y)) {
              inside = true;
              break;
            }
          if (inside) {
            mask.at(0, 0, y, x) = 1.0f;
            ++fg;
          }
        }
      const double frac = static_cast<double>(fg) / (static_cast<double>(size) * size);
      if (frac <= 0.03 || frac >= 0.6) continue;  // resample until fraction is workable

      // textured background, bright foreground, mild noise
      Tensor<float> img(Shape{1, 3, size, size});
      const double tex_fx = rng.uniform(1.0, 3.0), tex_fy = rng.uniform(1.0, 3.0);
      const double tex_phase = rng.uniform(0.0, 6.28318);
      double bg_base[3], fg_base[3];
      for (int c = 0; c < 3; ++c) {
        bg_base[c] = rng.uniform(0.10, 0.30);
        fg_base[c] = rng.uniform(0.70, 0.92);
      }
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double tex =
              0.06 * std::sin(tex_fx * 6.28318 * x / size + tex_phase) *
              std::cos(tex_fy * 6.28318 * y / size);
          const bool inside = mask.at(0, 0, y, x) > 0.5f;
          for (int c = 0; c < 3; ++c) {
            const double base = inside ? fg_base[c] : bg_base[c] + tex;
            const double noise = rng.uniform(-0.03, 0.03);
            img.at(0, c, y, x) = static_cast<float>(std::clamp(base + noise, 0.0, 1.0));
          }
        }
      s.image = std::move(img);
      s.mask = std::move(mask);
      break;
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// Writes the canonical on-disk layout (images/*.ppm, masks/*.pgm).
inline void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  for (const auto& s : ds.samples) {
    write_pnm((fs::path(dir) / "images" / (s.id + ".ppm")).string(), tensor_to_image(s.image));
    write_pnm((fs::path(dir) / "masks" / (s.id + ".pgm")).string(), tensor_to_image(s.mask));
  }
}

// ---------------------------------------------------------------------------
// batching: deterministic per-epoch shuffle, final partial batch kept.
// ---------------------------------------------------------------------------
struct Batch {
  Tensor<float> images;  // b x 3 x H x W
  Tensor<float> masks;   // b x 1 x H x W
};

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x62617463ULL + static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  return order;
}

inline Batch assemble_batch(const std::vector<const Sample*>& samples) {
  require(!samples.empty(), "assemble_batch: empty batch");
  const Shape is = samples[0]->image.shape;
  const Shape ms = samples[0]->mask.shape;
  Batch b;
  b.images = Tensor<float>(Shape{static_cast<int>(samples.size()), is.c, is.h, is.w});
  b.masks = Tensor<float>(Shape{static_cast<int>(samples.size()), ms.c, ms.h, ms.w});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    require(samples[i]->image.shape == is && samples[i]->mask.shape == ms,
            "assemble_batch: inconsistent sample shapes");
    std::copy_n(samples[i]->image.data.data(), samples[i]->image.numel(),
                b.images.data.data() + i * samples[i]->image.numel());
    std::copy_n(samples[i]->mask.data.data(), samples[i]->mask.numel(),
                b.masks.data.data() + i * samples[i]->mask.numel());
  }
  return b;
}

class Batcher {
 public:
  Batcher(const Dataset& ds, int batch_size, std::uint64_t seed)
      : ds_(&ds), batch_size_(batch_size), seed_(seed) {
    require(batch_size >= 1, "batcher: batch_size must be >= 1");
  }

  // Batches of one epoch; augmentation (when enabled) draws from a stream
  // derived from (seed, epoch) so epochs are individually reproducible.
  std::vector<Batch> epoch(int epoch_idx, bool do_augment = false,
                           const AugmentOptions& opt = {}) const {
    const auto order = epoch_order(ds_->size(), seed_, epoch_idx);
    Rng aug_rng(mix_seed(seed_, 0x61756700ULL + static_cast<std::uint64_t>(epoch_idx)));
    std::vector<Batch> batches;
    std::vector<Sample> augmented;
    for (std::size_t start = 0; start < order.size(); start += batch_size_) {
      const std::size_t end = std::min(order.size(), start + batch_size_);
      std::vector<const Sample*> members;
      augmented.clear();
      augmented.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        if (do_augment) {
          augmented.push_back(augment(ds_->samples[order[i]], aug_rng, opt));
        } else {
          members.push_back(&ds_->samples[order[i]]);
        }
      }
      if (do_augment)
        for (const auto& s : augmented) members.push_back(&s);
      batches.push_back(assemble_batch(members));
    }
    return batches;
  }

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  std::uint64_t seed_;
};

}  // namespace mfen
