#pragma once

#include <array>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "ops.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "tape.hpp"

namespace mfen {

// Architectural hyper-parameters. Defaults give the untuned five-stage
// network; the shipped config narrows blocks_per_stage to hit the reference
// complexity budget (see configs/mfennet.conf).
struct ModelConfig {
  std::vector<int> stage_widths{32, 64, 128, 256, 512};
  std::vector<int> blocks_per_stage{2, 2, 2, 2, 2};
  int mixer_kernel = 3;
  int ffn_ratio = 4;
  std::vector<int> spp_bins{1, 2, 3, 6};
  int in_channels = 3;
  int out_channels = 1;
  double norm_eps = 1e-5;
  bool mixer_subtract_input = false;

  void validate() const {
    require(stage_widths.size() == 5, "config: stage_widths must list 5 stages");
    require(blocks_per_stage.size() == 5, "config: blocks_per_stage must list 5 stages");
    for (int w : stage_widths) require(w >= 1, "config: stage widths must be >= 1");
    for (int b : blocks_per_stage) require(b >= 0, "config: blocks_per_stage must be >= 0");
    require(mixer_kernel >= 1 && mixer_kernel % 2 == 1, "config: mixer_kernel must be odd");
    require(ffn_ratio >= 1, "config: ffn_ratio must be >= 1");
    require(!spp_bins.empty(), "config: spp_bins must be non-empty");
    for (int b : spp_bins) require(b >= 1, "config: spp bins must be >= 1");
    require(in_channels >= 1 && out_channels >= 1, "config: channel counts must be >= 1");
    require(norm_eps > 0.0, "config: norm_eps must be > 0");
  }
};

// One row of the static layer listing used for cost accounting. Spatial
// sizes are derived from the forward-time input: a layer's output is either
// input/(out_div) per axis or a fixed out_fixed x out_fixed grid (SPP bins).
enum class LayerKind {
  Conv,
  UpConv,
  ChannelNorm,
  Swish,
  Relu,
  MaxPool,
  MixerPool,
  AdaptivePool,
  Upsample,
  Concat,
  Add,
};

struct LayerDesc {
  std::string name;
  LayerKind kind = LayerKind::Conv;
  int cin = 0;
  int cout = 0;
  int kernel = 1;
  int in_div = 1;    // input spatial divisor relative to the network input
  int in_fixed = 0;  // nonzero: input is a fixed in_fixed x in_fixed grid
  int out_div = 1;
  int out_fixed = 0;
  long long param_count = 0;
};

template <typename S>
struct MetaformerBlockParams {
  Param<S>* norm1_gamma = nullptr;
  Param<S>* norm1_beta = nullptr;
  Param<S>* ffn_up_w = nullptr;
  Param<S>* ffn_up_b = nullptr;
  Param<S>* ffn_down_w = nullptr;
  Param<S>* ffn_down_b = nullptr;
  Param<S>* norm2_gamma = nullptr;
  Param<S>* norm2_beta = nullptr;
};

template <typename S>
struct EncoderStageParams {
  Param<S>* emb_w = nullptr;
  Param<S>* emb_b = nullptr;
  std::vector<MetaformerBlockParams<S>> blocks;
};

template <typename S>
struct SppParams {
  std::vector<int> bins;
  std::vector<Param<S>*> proj_w;
  std::vector<Param<S>*> proj_b;
  Param<S>* fuse_w = nullptr;
  Param<S>* fuse_b = nullptr;
};

template <typename S>
struct DecoderStageParams {
  Param<S>* conv1_w = nullptr;
  Param<S>* conv1_b = nullptr;
  Param<S>* conv2_w = nullptr;
  Param<S>* conv2_b = nullptr;
};

template <typename S>
struct UnetStageParams {
  Param<S>* conv1_w = nullptr;
  Param<S>* conv1_b = nullptr;
  Param<S>* conv2_w = nullptr;
  Param<S>* conv2_b = nullptr;
  Param<S>* up_w = nullptr;  // decoder stages only
  Param<S>* up_b = nullptr;
};

// ---------------------------------------------------------------------------
// building blocks (free functions so they are testable in isolation)
// ---------------------------------------------------------------------------

// Two-sub-block residual unit: token mixing by stride-1 average pooling of
// the normalized input, then a pointwise FFN with Swish between the two
// 1x1 projections. With subtract_input the mixer emits Pool(u) - u.
template <typename S>
NodeRef<S> metaformer_block(Tape<S>& tape, const NodeRef<S>& z,
                            const MetaformerBlockParams<S>& p, int mixer_kernel,
                            bool subtract_input, double eps) {
  auto normed = ops::channel_layernorm(tape, z, *p.norm1_gamma, *p.norm1_beta, eps);
  auto mixed = ops::avgpool2d_samesize(tape, normed, mixer_kernel);
  if (subtract_input) mixed = ops::sub(tape, mixed, normed);
  auto z1 = ops::add(tape, z, mixed);

  auto normed2 = ops::channel_layernorm(tape, z1, *p.norm2_gamma, *p.norm2_beta, eps);
  auto up = ops::conv2d(tape, normed2, *p.ffn_up_w, *p.ffn_up_b, 1, 0);
  auto act = ops::swish(tape, up);
  auto down = ops::conv2d(tape, act, *p.ffn_down_w, *p.ffn_down_b, 1, 0);
  return ops::add(tape, z1, down);
}

// 3x3 stride-1 embedding conv followed by the stage's block stack; resolution
// is unchanged (the graph pools between stages).
template <typename S>
NodeRef<S> encoder_stage(Tape<S>& tape, const NodeRef<S>& x, const EncoderStageParams<S>& p,
                         int mixer_kernel, bool subtract_input, double eps) {
  auto z = ops::conv2d(tape, x, *p.emb_w, *p.emb_b, 1, 1);
  for (const auto& blk : p.blocks)
    z = metaformer_block(tape, z, blk, mixer_kernel, subtract_input, eps);
  return z;
}

// Pyramid pooling over the bottleneck: per bin, adaptive-average to
// bin x bin, 1x1-project to C/len(bins) channels, resize back, concatenate
// with the input and fuse with a 3x3 conv to C channels.
template <typename S>
NodeRef<S> spp(Tape<S>& tape, const NodeRef<S>& x, const SppParams<S>& p) {
  const Shape xs = x->value.shape;
  for (int b : p.bins)
    require(b <= xs.h && b <= xs.w, "spp: bin " + std::to_string(b) +
                                        " exceeds bottleneck spatial size of " + xs.str());
  auto cat = x;
  for (std::size_t i = 0; i < p.bins.size(); ++i) {
    auto pooled = ops::adaptive_avgpool(tape, x, p.bins[i]);
    auto proj = ops::conv2d(tape, pooled, *p.proj_w[i], *p.proj_b[i], 1, 0);
    auto up = ops::resize_nearest(tape, proj, xs.h, xs.w);
    cat = ops::concat_channels(tape, cat, up);
  }
  return ops::conv2d(tape, cat, *p.fuse_w, *p.fuse_b, 1, 1);
}

// 2x nearest upsampling, concat with the skip tensor, then two 3x3 conv +
// Swish layers at the stage width.
template <typename S>
NodeRef<S> decoder_stage(Tape<S>& tape, const NodeRef<S>& x, const NodeRef<S>& skip,
                         const DecoderStageParams<S>& p) {
  auto up = ops::upsample_nearest2x(tape, x);
  require(up->value.shape.h == skip->value.shape.h && up->value.shape.w == skip->value.shape.w,
          "decoder_stage: upsampled " + up->value.shape.str() + " does not match skip " +
              skip->value.shape.str());
  auto cat = ops::concat_channels(tape, up, skip);
  auto a = ops::swish(tape, ops::conv2d(tape, cat, *p.conv1_w, *p.conv1_b, 1, 1));
  return ops::swish(tape, ops::conv2d(tape, a, *p.conv2_w, *p.conv2_b, 1, 1));
}

// ---------------------------------------------------------------------------
// ModelGraph
// ---------------------------------------------------------------------------
template <typename S>
class ModelGraph {
 public:
  std::string arch;  // "mfennet" or "unet"
  ModelConfig config;
  ParamStore<S> params;
  std::vector<LayerDesc> layers;

  // mfennet structure
  std::vector<EncoderStageParams<S>> enc;
  SppParams<S> spp_params;
  std::vector<DecoderStageParams<S>> dec;
  Param<S>* head_w = nullptr;
  Param<S>* head_b = nullptr;

  // unet structure (encoder stages 0..3, bottleneck, decoder stages 3..0)
  std::vector<UnetStageParams<S>> uenc;
  std::vector<UnetStageParams<S>> udec;

  NodeRef<S> forward(Tape<S>& tape, const NodeRef<S>& input) {
    const Shape xs = input->value.shape;
    require(xs.h % 16 == 0 && xs.w % 16 == 0,
            "forward: input " + xs.str() + " must have spatial dims divisible by 16");
    require(xs.c == config.in_channels,
            "forward: input " + xs.str() + " does not provide " +
                std::to_string(config.in_channels) + " channels");
    if (arch == "unet") return forward_unet(tape, input);
    return forward_mfennet(tape, input);
  }

  // Encoder feature tensors of the latest mfennet forward (per stage, before
  // pooling); filled by forward_mfennet for shape assertions.
  std::vector<Shape> last_encoder_shapes;

  std::string manifest() const {
    std::ostringstream os;
    for (const auto& p : params) {
      const Shape& s = p.value.shape;
      os << p.name << " " << s.n << " " << s.c << " " << s.h << " " << s.w << "\n";
    }
    return os.str();
  }

  int mixer_blocks_in_encoder() const { return count_mixers("enc"); }
  int mixer_blocks_in_decoder() const { return count_mixers("dec"); }

 private:
  int count_mixers(const std::string& prefix) const {
    int n = 0;
    for (const auto& l : layers)
      if (l.kind == LayerKind::MixerPool && l.name.rfind(prefix, 0) == 0) ++n;
    return n;
  }

  NodeRef<S> forward_mfennet(Tape<S>& tape, const NodeRef<S>& input) {
    const int max_bin = *std::max_element(config.spp_bins.begin(), config.spp_bins.end());
    require(input->value.shape.h / 16 >= max_bin && input->value.shape.w / 16 >= max_bin,
            "forward: spp bin " + std::to_string(max_bin) +
                " exceeds bottleneck size for input " + input->value.shape.str() +
                "; lower model.spp_bins or enlarge the input");
    last_encoder_shapes.clear();
    std::vector<NodeRef<S>> skips;
    NodeRef<S> z = input;
    for (int i = 0; i < 5; ++i) {
      if (i > 0) z = ops::maxpool2d(tape, z, 2, 2);
      z = encoder_stage(tape, z, enc[i], config.mixer_kernel, config.mixer_subtract_input,
                        config.norm_eps);
      last_encoder_shapes.push_back(z->value.shape);
      if (i < 4) skips.push_back(z);
    }
    z = spp(tape, z, spp_params);
    for (int i = 3; i >= 0; --i) z = decoder_stage(tape, z, skips[i], dec[i]);
    return ops::conv2d(tape, z, *head_w, *head_b, 1, 0);
  }

  NodeRef<S> forward_unet(Tape<S>& tape, const NodeRef<S>& input) {
    std::vector<NodeRef<S>> skips;
    NodeRef<S> z = input;
    for (std::size_t i = 0; i < uenc.size(); ++i) {
      if (i > 0) z = ops::maxpool2d(tape, z, 2, 2);
      z = ops::relu(tape, ops::conv2d(tape, z, *uenc[i].conv1_w, *uenc[i].conv1_b, 1, 1));
      z = ops::relu(tape, ops::conv2d(tape, z, *uenc[i].conv2_w, *uenc[i].conv2_b, 1, 1));
      if (i + 1 < uenc.size()) skips.push_back(z);
    }
    for (int i = static_cast<int>(udec.size()) - 1; i >= 0; --i) {
      z = ops::upconv2x2(tape, z, *udec[i].up_w, *udec[i].up_b);
      z = ops::concat_channels(tape, z, skips[i]);
      z = ops::relu(tape, ops::conv2d(tape, z, *udec[i].conv1_w, *udec[i].conv1_b, 1, 1));
      z = ops::relu(tape, ops::conv2d(tape, z, *udec[i].conv2_w, *udec[i].conv2_b, 1, 1));
    }
    return ops::conv2d(tape, z, *head_w, *head_b, 1, 0);
  }
};

namespace detail {

template <typename S>
Param<S>& add_conv(ModelGraph<S>& g, const std::string& name, int cout, int cin, int k,
                   Rng& rng) {
  Param<S>& w = g.params.add(name + ".w", Shape{cout, cin, k, k});
  init_uniform_fanin(w, cin * k * k, rng);
  g.params.add(name + ".b", Shape{1, cout, 1, 1});  // biases start at zero
  return w;
}

template <typename S>
void add_norm(ModelGraph<S>& g, const std::string& name, int c) {
  Param<S>& gamma = g.params.add(name + ".gamma", Shape{1, c, 1, 1});
  gamma.value.fill(S(1));
  g.params.add(name + ".beta", Shape{1, c, 1, 1});
}

inline long long conv_params(int cout, int cin, int k) {
  return static_cast<long long>(k) * k * cin * cout + cout;
}

}  // namespace detail

// Builds the pooling-mixer encoder/decoder network. All parameters are
// seeded and registered in execution order.
template <typename S>
std::unique_ptr<ModelGraph<S>> build_mfennet(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  auto g = std::make_unique<ModelGraph<S>>();
  g->arch = "mfennet";
  g->config = config;
  Rng rng(mix_seed(seed, 0x6d66656eULL));  // init stream

  auto push = [&](LayerDesc d) { g->layers.push_back(std::move(d)); };

  int prev_c = config.in_channels;
  for (int i = 0; i < 5; ++i) {
    const int c = config.stage_widths[i];
    const int div = 1 << i;
    const std::string sn = "enc" + std::to_string(i);
    if (i > 0)
      push({"pool" + std::to_string(i - 1), LayerKind::MaxPool, prev_c, prev_c, 2, div / 2, 0,
            div, 0, 0});
    EncoderStageParams<S> st;
    st.emb_w = &detail::add_conv(*g, sn + ".emb", c, prev_c, 3, rng);
    st.emb_b = g->params.find(sn + ".emb.b");
    push({sn + ".emb", LayerKind::Conv, prev_c, c, 3, div, 0, div, 0,
          detail::conv_params(c, prev_c, 3)});
    const int hidden = c * config.ffn_ratio;
    for (int b = 0; b < config.blocks_per_stage[i]; ++b) {
      const std::string bn = sn + ".block" + std::to_string(b);
      MetaformerBlockParams<S> blk;
      detail::add_norm(*g, bn + ".norm1", c);
      blk.norm1_gamma = g->params.find(bn + ".norm1.gamma");
      blk.norm1_beta = g->params.find(bn + ".norm1.beta");
      push({bn + ".norm1", LayerKind::ChannelNorm, c, c, 1, div, 0, div, 0, 2LL * c});
      push({bn + ".mixer.pool", LayerKind::MixerPool, c, c, config.mixer_kernel, div, 0, div, 0,
            0});
      push({bn + ".add1", LayerKind::Add, c, c, 1, div, 0, div, 0, 0});
      detail::add_norm(*g, bn + ".norm2", c);
      blk.norm2_gamma = g->params.find(bn + ".norm2.gamma");
      blk.norm2_beta = g->params.find(bn + ".norm2.beta");
      push({bn + ".norm2", LayerKind::ChannelNorm, c, c, 1, div, 0, div, 0, 2LL * c});
      blk.ffn_up_w = &detail::add_conv(*g, bn + ".ffn.up", hidden, c, 1, rng);
      blk.ffn_up_b = g->params.find(bn + ".ffn.up.b");
      push({bn + ".ffn.up", LayerKind::Conv, c, hidden, 1, div, 0, div, 0,
            detail::conv_params(hidden, c, 1)});
      push({bn + ".ffn.swish", LayerKind::Swish, hidden, hidden, 1, div, 0, div, 0, 0});
      blk.ffn_down_w = &detail::add_conv(*g, bn + ".ffn.down", c, hidden, 1, rng);
      blk.ffn_down_b = g->params.find(bn + ".ffn.down.b");
      push({bn + ".ffn.down", LayerKind::Conv, hidden, c, 1, div, 0, div, 0,
            detail::conv_params(c, hidden, 1)});
      push({bn + ".add2", LayerKind::Add, c, c, 1, div, 0, div, 0, 0});
      st.blocks.push_back(blk);
    }
    g->enc.push_back(std::move(st));
    prev_c = c;
  }

  // pyramid pooling at the 16x-downsampled bottleneck
  const int bc = config.stage_widths[4];
  const int proj_c = std::max(1, bc / static_cast<int>(config.spp_bins.size()));
  g->spp_params.bins = config.spp_bins;
  int cat_c = bc;
  for (std::size_t i = 0; i < config.spp_bins.size(); ++i) {
    const int bin = config.spp_bins[i];
    const std::string bn = "spp.branch" + std::to_string(bin);
    push({bn + ".pool", LayerKind::AdaptivePool, bc, bc, 1, 16, 0, 0, bin, 0});
    g->spp_params.proj_w.push_back(&detail::add_conv(*g, bn + ".proj", proj_c, bc, 1, rng));
    g->spp_params.proj_b.push_back(g->params.find(bn + ".proj.b"));
    push({bn + ".proj", LayerKind::Conv, bc, proj_c, 1, 0, bin, 0, bin,
          detail::conv_params(proj_c, bc, 1)});
    push({bn + ".up", LayerKind::Upsample, proj_c, proj_c, 1, 0, bin, 16, 0, 0});
    cat_c += proj_c;
  }
  push({"spp.concat", LayerKind::Concat, cat_c, cat_c, 1, 16, 0, 16, 0, 0});
  g->spp_params.fuse_w = &detail::add_conv(*g, "spp.fuse", bc, cat_c, 3, rng);
  g->spp_params.fuse_b = g->params.find("spp.fuse.b");
  push({"spp.fuse", LayerKind::Conv, cat_c, bc, 3, 16, 0, 16, 0,
        detail::conv_params(bc, cat_c, 3)});

  // decoder mirrors the encoder ladder
  g->dec.resize(4);
  int up_c = bc;
  for (int i = 3; i >= 0; --i) {
    const int c = config.stage_widths[i];
    const int div = 1 << i;
    const std::string dn = "dec" + std::to_string(i);
    push({dn + ".up", LayerKind::Upsample, up_c, up_c, 1, div * 2, 0, div, 0, 0});
    const int cat = up_c + c;
    push({dn + ".concat", LayerKind::Concat, cat, cat, 1, div, 0, div, 0, 0});
    DecoderStageParams<S> d;
    d.conv1_w = &detail::add_conv(*g, dn + ".conv1", c, cat, 3, rng);
    d.conv1_b = g->params.find(dn + ".conv1.b");
    push({dn + ".conv1", LayerKind::Conv, cat, c, 3, div, 0, div, 0,
          detail::conv_params(c, cat, 3)});
    push({dn + ".swish1", LayerKind::Swish, c, c, 1, div, 0, div, 0, 0});
    d.conv2_w = &detail::add_conv(*g, dn + ".conv2", c, c, 3, rng);
    d.conv2_b = g->params.find(dn + ".conv2.b");
    push({dn + ".conv2", LayerKind::Conv, c, c, 3, div, 0, div, 0,
          detail::conv_params(c, c, 3)});
    push({dn + ".swish2", LayerKind::Swish, c, c, 1, div, 0, div, 0, 0});
    g->dec[i] = d;
    up_c = c;
  }

  g->head_w = &detail::add_conv(*g, "head", config.out_channels, config.stage_widths[0], 1, rng);
  g->head_b = g->params.find("head.b");
  push({"head", LayerKind::Conv, config.stage_widths[0], config.out_channels, 1, 1, 0, 1, 0,
        detail::conv_params(config.out_channels, config.stage_widths[0], 1)});
  return g;
}

// Reference U-Net used for the complexity comparison: widths 64..1024, two
// 3x3 convs per stage, ReLU, 2x2 max pooling, and 2x2 up-convolutions.
template <typename S>
std::unique_ptr<ModelGraph<S>> build_unet_baseline(const ModelConfig& config,
                                                   std::uint64_t seed) {
  config.validate();
  auto g = std::make_unique<ModelGraph<S>>();
  g->arch = "unet";
  g->config = config;
  Rng rng(mix_seed(seed, 0x756e6574ULL));

  const std::array<int, 5> widths{64, 128, 256, 512, 1024};
  auto push = [&](LayerDesc d) { g->layers.push_back(std::move(d)); };

  int prev_c = config.in_channels;
  for (int i = 0; i < 5; ++i) {
    const int c = widths[i];
    const int div = 1 << i;
    const std::string sn = "enc" + std::to_string(i);
    if (i > 0)
      push({"pool" + std::to_string(i - 1), LayerKind::MaxPool, prev_c, prev_c, 2, div / 2, 0,
            div, 0, 0});
    UnetStageParams<S> st;
    st.conv1_w = &detail::add_conv(*g, sn + ".conv1", c, prev_c, 3, rng);
    st.conv1_b = g->params.find(sn + ".conv1.b");
    push({sn + ".conv1", LayerKind::Conv, prev_c, c, 3, div, 0, div, 0,
          detail::conv_params(c, prev_c, 3)});
    push({sn + ".relu1", LayerKind::Relu, c, c, 1, div, 0, div, 0, 0});
    st.conv2_w = &detail::add_conv(*g, sn + ".conv2", c, c, 3, rng);
    st.conv2_b = g->params.find(sn + ".conv2.b");
    push({sn + ".conv2", LayerKind::Conv, c, c, 3, div, 0, div, 0,
          detail::conv_params(c, c, 3)});
    push({sn + ".relu2", LayerKind::Relu, c, c, 1, div, 0, div, 0, 0});
    g->uenc.push_back(st);
    prev_c = c;
  }

  g->udec.resize(4);
  int up_c = widths[4];
  for (int i = 3; i >= 0; --i) {
    const int c = widths[i];
    const int div = 1 << i;
    const std::string dn = "dec" + std::to_string(i);
    UnetStageParams<S> d;
    Param<S>& uw = g->params.add(dn + ".up.w", Shape{up_c, c, 2, 2});
    init_uniform_fanin(uw, up_c * 4, rng);
    g->params.add(dn + ".up.b", Shape{1, c, 1, 1});
    d.up_w = &uw;
    d.up_b = g->params.find(dn + ".up.b");
    push({dn + ".up", LayerKind::UpConv, up_c, c, 2, div * 2, 0, div, 0,
          4LL * up_c * c + c});
    const int cat = c + c;
    push({dn + ".concat", LayerKind::Concat, cat, cat, 1, div, 0, div, 0, 0});
    d.conv1_w = &detail::add_conv(*g, dn + ".conv1", c, cat, 3, rng);
    d.conv1_b = g->params.find(dn + ".conv1.b");
    push({dn + ".conv1", LayerKind::Conv, cat, c, 3, div, 0, div, 0,
          detail::conv_params(c, cat, 3)});
    push({dn + ".relu1", LayerKind::Relu, c, c, 1, div, 0, div, 0, 0});
    d.conv2_w = &detail::add_conv(*g, dn + ".conv2", c, c, 3, rng);
    d.conv2_b = g->params.find(dn + ".conv2.b");
    push({dn + ".conv2", LayerKind::Conv, c, c, 3, div, 0, div, 0,
          detail::conv_params(c, c, 3)});
    push({dn + ".relu2", LayerKind::Relu, c, c, 1, div, 0, div, 0, 0});
    g->udec[i] = d;
    up_c = c;
  }

  g->head_w = &detail::add_conv(*g, "head", config.out_channels, widths[0], 1, rng);
  g->head_b = g->params.find("head.b");
  push({"head", LayerKind::Conv, widths[0], config.out_channels, 1, 1, 0, 1, 0,
        detail::conv_params(config.out_channels, widths[0], 1)});
  return g;
}

template <typename S>
std::unique_ptr<ModelGraph<S>> build_model(const std::string& arch, const ModelConfig& config,
                                           std::uint64_t seed) {
  if (arch == "mfennet") return build_mfennet<S>(config, seed);
  if (arch == "unet") return build_unet_baseline<S>(config, seed);
  throw std::runtime_error("unknown architecture: " + arch + " (expected mfennet or unet)");
}

}  // namespace mfen
