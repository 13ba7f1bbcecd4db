#pragma once

#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "model.hpp"

namespace mfen {

enum class FlopConvention { MacAsOne, MacAsTwo };

inline const char* convention_name(FlopConvention c) {
  return c == FlopConvention::MacAsOne ? "MAC_AS_ONE" : "MAC_AS_TWO";
}

struct CostRow {
  std::string name;
  long long params = 0;
  long long flops = 0;
};

struct CostReport {
  std::vector<CostRow> rows;
  long long total_params = 0;
  long long total_flops = 0;
  long long conv_flops = 0;  // conv-family rows only, for convention comparisons
  FlopConvention convention = FlopConvention::MacAsOne;
  int input_h = 0;
  int input_w = 0;

  std::string text() const {
    std::size_t name_w = 4;
    for (const auto& r : rows) name_w = std::max(name_w, r.name.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "name"
       << std::right << std::setw(14) << "params" << std::setw(18) << "flops" << "\n";
    for (const auto& r : rows)
      os << std::left << std::setw(static_cast<int>(name_w) + 2) << r.name << std::right
         << std::setw(14) << r.params << std::setw(18) << r.flops << "\n";
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "total" << std::right
       << std::setw(14) << total_params << std::setw(18) << total_flops << "\n";
    os << std::fixed << std::setprecision(2);
    os << "input: " << input_h << "x" << input_w << "  convention: " << convention_name(convention)
       << "\n";
    os << "params: " << (static_cast<double>(total_params) / 1e6) << " M\n";
    os << "flops:  " << (static_cast<double>(total_flops) / 1e9) << " G\n";
    return os.str();
  }

  std::string csv() const {
    std::ostringstream os;
    os << "name,params,flops\n";
    for (const auto& r : rows) os << r.name << "," << r.params << "," << r.flops << "\n";
    os << "total," << total_params << "," << total_flops << "\n";
    return os.str();
  }
};

namespace detail {

inline long long pixels(int h, int w, int div, int fixed) {
  if (fixed > 0) return static_cast<long long>(fixed) * fixed;
  return (static_cast<long long>(h) / div) * (w / div);
}

// Per-layer cost rules. Convolutions count k*k*cin*cout MAC-units per output
// pixel plus one add per biased output element; up-convolutions use the same
// dense formula at the output resolution (the convention common FLOP counters
// apply to strided transposed kernels). Elementwise layers count one unit per
// output element per arithmetic pass.
inline long long layer_flops(const LayerDesc& l, int h, int w, FlopConvention conv) {
  const long long out_pix = pixels(h, w, l.out_div, l.out_fixed);
  const long long in_pix = pixels(h, w, l.in_div, l.in_fixed);
  const long long f = conv == FlopConvention::MacAsTwo ? 2 : 1;
  switch (l.kind) {
    case LayerKind::Conv:
    case LayerKind::UpConv: {
      const long long macs =
          static_cast<long long>(l.kernel) * l.kernel * l.cin * l.cout * out_pix;
      return macs * f + static_cast<long long>(l.cout) * out_pix;
    }
    case LayerKind::ChannelNorm:
      return 4LL * l.cout * out_pix;
    case LayerKind::Swish:
      return 2LL * l.cout * out_pix;
    case LayerKind::Relu:
      return 1LL * l.cout * out_pix;
    case LayerKind::MaxPool:
      return static_cast<long long>(l.kernel) * l.kernel * l.cout * out_pix;
    case LayerKind::MixerPool:
      return static_cast<long long>(l.kernel) * l.kernel * l.cout * out_pix;
    case LayerKind::AdaptivePool:
      return static_cast<long long>(l.cout) * in_pix;
    case LayerKind::Upsample:
      return static_cast<long long>(l.cout) * out_pix;
    case LayerKind::Add:
      return static_cast<long long>(l.cout) * out_pix;
    case LayerKind::Concat:
      return 0;
  }
  return 0;
}

}  // namespace detail

template <typename S>
long long count_params(const ModelGraph<S>& g) {
  long long total = 0;
  for (const auto& l : g.layers) total += l.param_count;
  return total;
}

template <typename S>
long long count_flops(const ModelGraph<S>& g, int h, int w,
                      FlopConvention conv = FlopConvention::MacAsOne) {
  require(h % 16 == 0 && w % 16 == 0, "count_flops: input size must be divisible by 16");
  long long total = 0;
  for (const auto& l : g.layers) total += detail::layer_flops(l, h, w, conv);
  return total;
}

template <typename S>
CostReport report(const ModelGraph<S>& g, int h, int w,
                  FlopConvention conv = FlopConvention::MacAsOne) {
  require(h % 16 == 0 && w % 16 == 0, "report: input size must be divisible by 16");
  CostReport rep;
  rep.convention = conv;
  rep.input_h = h;
  rep.input_w = w;
  for (const auto& l : g.layers) {
    CostRow row{l.name, l.param_count, detail::layer_flops(l, h, w, conv)};
    rep.total_params += row.params;
    rep.total_flops += row.flops;
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::UpConv) rep.conv_flops += row.flops;
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace mfen
