// Multimodal token features: text, spatial position and visual ROI
// embeddings fused by layer normalisation and contextualised by multi-head
// self-attention over all tokens of a document.
#pragma once

#include "matchvie/ad/ops.hpp"
#include "matchvie/docmodel.hpp"
#include "matchvie/init.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace matchvie::backbone {

struct BackboneConfig {
  int embed_dim = 64;
  int num_heads = 4;
  int num_layers = 1;
  bool residual = false;
  bool use_visual = true;
  int image_channels = 1;
  std::vector<int> conv_channels = {8, 16, 16};
  int conv_kernel = 3;
  int conv_stride = 2;
  int roi_h = 2;
  int roi_w = 2;

  void validate() const {
    if (embed_dim <= 0) throw ConfigError("backbone.embed_dim must be positive");
    if (num_heads <= 0 || embed_dim % num_heads != 0)
      throw ConfigError("backbone.num_heads must divide backbone.embed_dim");
    if (num_layers < 0) throw ConfigError("backbone.num_layers must be >= 0");
    if (use_visual) {
      if (conv_channels.empty()) throw ConfigError("backbone.conv_channels must not be empty");
      for (int c : conv_channels)
        if (c <= 0) throw ConfigError("backbone.conv_channels must be positive");
      if (conv_kernel <= 0 || conv_kernel % 2 == 0) throw ConfigError("backbone.conv_kernel must be odd and positive");
      if (conv_stride <= 0) throw ConfigError("backbone.conv_stride must be positive");
      if (roi_h <= 0 || roi_w <= 0) throw ConfigError("backbone.roi_h/roi_w must be positive");
      if (image_channels <= 0) throw ConfigError("backbone.image_channels must be positive");
    }
  }
};

template <typename Scalar>
struct FusedContext {
  ad::Var<Scalar> features;                   // total_tokens x d
  std::vector<std::pair<int, int>> segment_spans;  // [start, end) per segment
};

/// Shift-and-select operators for a "same"-padded convolution: one sparse
/// (out_h*out_w) x (h*w) matrix per kernel offset.
template <typename Scalar>
struct ConvGeometry {
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  std::vector<ad::SparseMat<Scalar>> taps;
};

template <typename Scalar>
const ConvGeometry<Scalar>& conv_geometry(int h, int w, int kernel, int stride) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, int, int>, ConvGeometry<Scalar>> cache;
  std::lock_guard<std::mutex> lock(mu);
  const auto key = std::make_tuple(h, w, kernel, stride);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  ConvGeometry<Scalar> g;
  const int pad = kernel / 2;
  g.in_h = h;
  g.in_w = w;
  g.out_h = (h + 2 * pad - kernel) / stride + 1;
  g.out_w = (w + 2 * pad - kernel) / stride + 1;
  for (int dy = 0; dy < kernel; ++dy)
    for (int dx = 0; dx < kernel; ++dx) {
      std::vector<Eigen::Triplet<Scalar>> trip;
      for (int r = 0; r < g.out_h; ++r)
        for (int c = 0; c < g.out_w; ++c) {
          const int sr = r * stride + dy - pad;
          const int sc = c * stride + dx - pad;
          if (sr < 0 || sr >= h || sc < 0 || sc >= w) continue;
          trip.emplace_back(r * g.out_w + c, sr * w + sc, Scalar(1));
        }
      ad::SparseMat<Scalar> s(g.out_h * g.out_w, h * w);
      s.setFromTriplets(trip.begin(), trip.end());
      g.taps.push_back(std::move(s));
    }
  return cache.emplace(key, std::move(g)).first->second;
}

/// Everything the backbone needs from one document, precomputed.
template <typename Scalar>
struct BackboneInputs {
  int total_tokens = 0;
  ad::SparseMat<Scalar> token_mix;      // total_tokens x vocab: averages of table rows
  ad::Mat<Scalar> boxes;                // total_tokens x 4, page-normalised
  std::vector<std::pair<int, int>> spans;
  std::optional<ad::Mat<Scalar>> image;  // (h*w) x channels
  int image_h = 0, image_w = 0;
  std::vector<ad::SparseMat<Scalar>> roi;  // one per pooled cell: total_tokens x (fh*fw)
};

/// Bilinear sampling operators for ROI-align over a feature map covering the
/// whole page. Cell centres are sampled once each (aligned convention: a
/// feature cell centre sits at (index + 0.5) / scale on the page).
template <typename Scalar>
std::vector<ad::SparseMat<Scalar>> roi_align_operators(const std::vector<BBox>& boxes, double page_w, double page_h,
                                                       int feat_h, int feat_w, int roi_h, int roi_w) {
  std::vector<ad::SparseMat<Scalar>> out;
  const double sx = feat_w / page_w;
  const double sy = feat_h / page_h;
  const int n = static_cast<int>(boxes.size());
  for (int a = 0; a < roi_h; ++a)
    for (int b = 0; b < roi_w; ++b) {
      std::vector<Eigen::Triplet<Scalar>> trip;
      for (int t = 0; t < n; ++t) {
        const BBox& box = boxes[static_cast<std::size_t>(t)];
        const double x = box.x0 + (b + 0.5) * box.width() / roi_w;
        const double y = box.y0 + (a + 0.5) * box.height() / roi_h;
        const double fx = std::clamp(x * sx - 0.5, 0.0, static_cast<double>(feat_w - 1));
        const double fy = std::clamp(y * sy - 0.5, 0.0, static_cast<double>(feat_h - 1));
        const int x0 = static_cast<int>(std::floor(fx));
        const int y0 = static_cast<int>(std::floor(fy));
        const int x1 = std::min(x0 + 1, feat_w - 1);
        const int y1 = std::min(y0 + 1, feat_h - 1);
        const double wx = fx - x0;
        const double wy = fy - y0;
        trip.emplace_back(t, y0 * feat_w + x0, static_cast<Scalar>((1 - wy) * (1 - wx)));
        trip.emplace_back(t, y0 * feat_w + x1, static_cast<Scalar>((1 - wy) * wx));
        trip.emplace_back(t, y1 * feat_w + x0, static_cast<Scalar>(wy * (1 - wx)));
        trip.emplace_back(t, y1 * feat_w + x1, static_cast<Scalar>(wy * wx));
      }
      ad::SparseMat<Scalar> s(n, feat_h * feat_w);
      s.setFromTriplets(trip.begin(), trip.end());  // duplicates at clamped edges are summed
      out.push_back(std::move(s));
    }
  return out;
}

template <typename Scalar>
BackboneInputs<Scalar> prepare_inputs(const Document& doc, const Vocabulary& vocab, const BackboneConfig& cfg) {
  BackboneInputs<Scalar> in;
  const int m = static_cast<int>(doc.total_tokens());
  in.total_tokens = m;
  in.boxes.resize(m, 4);
  std::vector<Eigen::Triplet<Scalar>> mix;
  std::vector<BBox> page_boxes;
  page_boxes.reserve(static_cast<std::size_t>(m));
  const double pw = doc.page_width > 0 ? doc.page_width : 1.0;
  const double ph = doc.page_height > 0 ? doc.page_height : 1.0;
  int row = 0;
  for (const auto& s : doc.segments) {
    const int start = row;
    for (const auto& t : s.tokens) {
      const auto ids = vocab.lookup_word(t.text);
      const Scalar w = Scalar(1) / static_cast<Scalar>(ids.size());
      for (int id : ids) mix.emplace_back(row, id, w);
      in.boxes(row, 0) = static_cast<Scalar>(t.box.x0 / pw);
      in.boxes(row, 1) = static_cast<Scalar>(t.box.y0 / ph);
      in.boxes(row, 2) = static_cast<Scalar>(t.box.x1 / pw);
      in.boxes(row, 3) = static_cast<Scalar>(t.box.y1 / ph);
      page_boxes.push_back(t.box);
      ++row;
    }
    in.spans.emplace_back(start, row);
  }
  in.token_mix.resize(m, static_cast<Eigen::Index>(vocab.size()));
  in.token_mix.setFromTriplets(mix.begin(), mix.end());

  if (cfg.use_visual && doc.image) {
    const Image& img = *doc.image;
    if (img.channels != cfg.image_channels)
      throw ConfigError("backbone.image_channels is " + std::to_string(cfg.image_channels) + " but document " +
                        doc.id + " has " + std::to_string(img.channels));
    in.image_h = img.height;
    in.image_w = img.width;
    ad::Mat<Scalar> pix(img.height * img.width, img.channels);
    for (int r = 0; r < img.height; ++r)
      for (int c = 0; c < img.width; ++c)
        for (int ch = 0; ch < img.channels; ++ch) pix(r * img.width + c, ch) = static_cast<Scalar>(img.at(r, c, ch));
    in.image = std::move(pix);
    int fh = img.height, fw = img.width;
    for (std::size_t l = 0; l < cfg.conv_channels.size(); ++l) {
      const auto& g = conv_geometry<Scalar>(fh, fw, cfg.conv_kernel, cfg.conv_stride);
      fh = g.out_h;
      fw = g.out_w;
    }
    in.roi = roi_align_operators<Scalar>(page_boxes, pw, ph, fh, fw, cfg.roi_h, cfg.roi_w);
  }
  return in;
}

template <typename Scalar>
void add_params(ad::ParamStore<Scalar>& store, const BackboneConfig& cfg, std::size_t vocab_size, InitRng& rng) {
  cfg.validate();
  const int d = cfg.embed_dim;
  store.add("backbone/token_table", uniform_matrix<Scalar>(static_cast<Eigen::Index>(vocab_size), d, 0.1, rng));
  store.add("backbone/pos_w", xavier<Scalar>(4, d, rng));
  store.add("backbone/pos_b", zeros<Scalar>(1, d));
  if (cfg.use_visual) {
    int cin = cfg.image_channels;
    const int taps = cfg.conv_kernel * cfg.conv_kernel;
    for (std::size_t l = 0; l < cfg.conv_channels.size(); ++l) {
      const int cout = cfg.conv_channels[l];
      const std::string p = "backbone/conv" + std::to_string(l);
      store.add(p + "/w", xavier<Scalar>(taps * cin, cout, rng));
      store.add(p + "/b", zeros<Scalar>(1, cout));
      cin = cout;
    }
    store.add("backbone/roi_w", xavier<Scalar>(cin * cfg.roi_h * cfg.roi_w, d, rng));
    store.add("backbone/roi_b", zeros<Scalar>(1, d));
  }
  store.add("backbone/visual_linear_w", xavier<Scalar>(d, d, rng));
  store.add("backbone/visual_linear_b", zeros<Scalar>(1, d));
  store.add("backbone/ln_gain", ad::Mat<Scalar>::Ones(1, d));
  store.add("backbone/ln_bias", zeros<Scalar>(1, d));
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "backbone/attn" + std::to_string(l);
    for (const char* w : {"/wq", "/wk", "/wv", "/wo"}) store.add(p + w, xavier<Scalar>(d, d, rng));
    for (const char* b : {"/bq", "/bk", "/bv", "/bo"}) store.add(p + b, zeros<Scalar>(1, d));
  }
}

template <typename Scalar>
ad::Var<Scalar> param(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store, const std::string& name) {
  return tape.param(store.get(name));
}

/// Row m is the (averaged) table row of token m in reading order.
template <typename Scalar>
ad::Var<Scalar> embed_tokens(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store, const BackboneInputs<Scalar>& in) {
  return ad::sparse_left(in.token_mix, param(tape, store, "backbone/token_table"));
}

/// p_m = [x0, y0, x1, y1] W + b with page-normalised coordinates.
template <typename Scalar>
ad::Var<Scalar> embed_positions(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store,
                                const BackboneInputs<Scalar>& in) {
  return ad::linear(tape.constant(in.boxes), param(tape, store, "backbone/pos_w"), param(tape, store, "backbone/pos_b"));
}

/// Convolution stack over the whole page image: (fh*fw) x channels.
template <typename Scalar>
ad::Var<Scalar> conv_features(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store, const BackboneConfig& cfg,
                              const BackboneInputs<Scalar>& in) {
  ad::Var<Scalar> x = tape.constant(*in.image);
  int h = in.image_h, w = in.image_w;
  for (std::size_t l = 0; l < cfg.conv_channels.size(); ++l) {
    const std::string p = "backbone/conv" + std::to_string(l);
    const auto& geom = conv_geometry<Scalar>(h, w, cfg.conv_kernel, cfg.conv_stride);
    ad::Var<Scalar> wt = param(tape, store, p + "/w");
    const Eigen::Index cin = x.cols();
    std::optional<ad::Var<Scalar>> acc;
    for (std::size_t k = 0; k < geom.taps.size(); ++k) {
      if (geom.taps[k].nonZeros() == 0) continue;
      ad::Var<Scalar> term =
          ad::matmul(ad::sparse_left(geom.taps[k], x), ad::slice_rows(wt, static_cast<Eigen::Index>(k) * cin, cin));
      acc = acc ? *acc + term : term;
    }
    x = ad::relu(ad::add_bias(*acc, param(tape, store, p + "/b")));
    h = geom.out_h;
    w = geom.out_w;
  }
  return x;
}

/// Bilinear ROI pooling of a feature map: total_tokens x (cells * channels),
/// cell-major.
template <typename Scalar>
ad::Var<Scalar> roi_align(ad::Var<Scalar> features, const BackboneInputs<Scalar>& in) {
  std::vector<ad::Var<Scalar>> cells;
  cells.reserve(in.roi.size());
  for (const auto& op : in.roi) cells.push_back(ad::sparse_left(op, features));
  return ad::concat_cols<Scalar>(cells);
}

template <typename Scalar>
ad::Var<Scalar> embed_visual(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store, const BackboneConfig& cfg,
                             const BackboneInputs<Scalar>& in) {
  if (!cfg.use_visual) return tape.constant(ad::Mat<Scalar>::Zero(in.total_tokens, cfg.embed_dim));
  if (!in.image) throw ConfigError("backbone.use_visual is set but the document has no image");
  if (in.total_tokens == 0) return tape.constant(ad::Mat<Scalar>::Zero(0, cfg.embed_dim));
  ad::Var<Scalar> pooled = roi_align(conv_features(tape, store, cfg, in), in);
  return ad::linear(pooled, param(tape, store, "backbone/roi_w"), param(tape, store, "backbone/roi_b"));
}

/// LayerNorm(Linear(I) + P + T); serves as Q, K and V.
template <typename Scalar>
ad::Var<Scalar> fuse_qkv(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store, ad::Var<Scalar> text,
                         ad::Var<Scalar> position, ad::Var<Scalar> visual) {
  if (text.rows() != position.rows() || text.rows() != visual.rows() || text.cols() != position.cols() ||
      text.cols() != visual.cols())
    throw ad::ShapeError("fuse_qkv: T, P and I must share shape");
  ad::Var<Scalar> lin =
      ad::linear(visual, param(tape, store, "backbone/visual_linear_w"), param(tape, store, "backbone/visual_linear_b"));
  return ad::layer_norm_rows(lin + position + text, param(tape, store, "backbone/ln_gain"),
                             param(tape, store, "backbone/ln_bias"), Scalar(1e-5));
}

/// One multi-head scaled dot-product attention layer over all tokens.
template <typename Scalar>
ad::Var<Scalar> attention_layer(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store, const BackboneConfig& cfg,
                                ad::Var<Scalar> x, int layer, std::vector<ad::Mat<Scalar>>* weights_out = nullptr) {
  const std::string p = "backbone/attn" + std::to_string(layer);
  auto proj = [&](const char* w, const char* b) {
    return ad::linear(x, param(tape, store, p + w), param(tape, store, p + b));
  };
  ad::Var<Scalar> q = proj("/wq", "/bq");
  ad::Var<Scalar> k = proj("/wk", "/bk");
  ad::Var<Scalar> v = proj("/wv", "/bv");
  const int dh = cfg.embed_dim / cfg.num_heads;
  const Scalar inv = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  std::vector<ad::Var<Scalar>> heads;
  for (int h = 0; h < cfg.num_heads; ++h) {
    ad::Var<Scalar> qh = ad::slice_cols(q, h * dh, dh);
    ad::Var<Scalar> kh = ad::slice_cols(k, h * dh, dh);
    ad::Var<Scalar> vh = ad::slice_cols(v, h * dh, dh);
    ad::Var<Scalar> a = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv));
    if (weights_out) weights_out->push_back(a.value());
    heads.push_back(ad::matmul(a, vh));
  }
  return ad::linear(ad::concat_cols<Scalar>(heads), param(tape, store, p + "/wo"), param(tape, store, p + "/bo"));
}

template <typename Scalar>
FusedContext<Scalar> self_attention_context(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store,
                                            const BackboneConfig& cfg, ad::Var<Scalar> fused,
                                            std::vector<std::pair<int, int>> spans) {
  ad::Var<Scalar> x = fused;
  if (x.rows() > 0) {
    for (int l = 0; l < cfg.num_layers; ++l) {
      ad::Var<Scalar> y = attention_layer(tape, store, cfg, x, l);
      x = cfg.residual ? x + y : y;
    }
  }
  return {x, std::move(spans)};
}

/// Full backbone: tokens -> context features.
template <typename Scalar>
FusedContext<Scalar> encode(ad::Tape<Scalar>& tape, ad::ParamStore<Scalar>& store, const BackboneConfig& cfg,
                            const BackboneInputs<Scalar>& in) {
  ad::Var<Scalar> t = embed_tokens(tape, store, in);
  ad::Var<Scalar> p = embed_positions(tape, store, in);
  ad::Var<Scalar> i = embed_visual(tape, store, cfg, in);
  return self_attention_context(tape, store, cfg, fuse_qkv(tape, store, t, p, i), in.spans);
}

}  // namespace matchvie::backbone
