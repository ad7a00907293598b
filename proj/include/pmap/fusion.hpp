#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "pmap/attention.hpp"
#include "pmap/loss.hpp"
#include "pmap/optim.hpp"
#include "pmap/osm.hpp"
#include "pmap/world.hpp"

namespace pmap {

// --- Configuration --------------------------------------------------------

// Cross-attention stack hyperparameters. model_dim is the channel width C
// carried through the whole network; heads * head_dim must equal C so the
// concatenated heads project back residually.
struct AttentionConfig {
  int64_t num_heads = 4;
  int64_t model_dim = 16;
  int64_t head_dim = 4;
  int64_t num_layers = 2;
  double dropout_rate = 0.1;

  void validate() const {
    if (num_heads < 1 || model_dim < 1 || head_dim < 1)
      throw InvalidArgument("AttentionConfig: dims must be >= 1");
    if (num_heads * head_dim != model_dim)
      throw InvalidArgument("AttentionConfig: num_heads * head_dim != model_dim");
    if (model_dim % 4 != 0)
      throw InvalidArgument("AttentionConfig: model_dim must be a multiple of 4");
    if (num_layers < 1) throw InvalidArgument("AttentionConfig: num_layers must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw InvalidArgument("AttentionConfig: dropout_rate must be in [0, 1)");
  }
};

// How the SD prior enters the BEV branch. none is the no-prior baseline;
// the two concat modes are ablations of the attention mechanism.
enum class FusionMode { none, simply_concat, cnn_concat, cross_attention };

inline std::string fusion_mode_to_string(FusionMode m) {
  switch (m) {
    case FusionMode::none: return "none";
    case FusionMode::simply_concat: return "simply_concat";
    case FusionMode::cnn_concat: return "cnn_concat";
    case FusionMode::cross_attention: return "cross_attention";
  }
  throw InvalidArgument("fusion_mode_to_string: bad enum value");
}

inline FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "none") return FusionMode::none;
  if (s == "simply_concat") return FusionMode::simply_concat;
  if (s == "cnn_concat") return FusionMode::cnn_concat;
  if (s == "cross_attention") return FusionMode::cross_attention;
  throw ParseError("unknown fusion mode: " + s);
}

struct FusionConfig {
  GridSpec grid;
  int64_t downsample = 4;  // power of two so the stride-2 / upsample-2x stacks pair up
  AttentionConfig attention;
  FusionMode mode = FusionMode::cross_attention;
  int64_t num_classes = kNumForegroundClasses;

  int64_t rows_small() const { return grid.rows / downsample; }
  int64_t cols_small() const { return grid.cols / downsample; }
  int64_t num_tokens() const { return rows_small() * cols_small(); }
  int64_t num_stages() const {
    int64_t s = 0;
    for (int64_t d = downsample; d > 1; d /= 2) ++s;
    return s;
  }

  void validate() const {
    if (grid.rows < 1 || grid.cols < 1 || grid.resolution_m <= 0.0)
      throw InvalidArgument("FusionConfig: grid is not set");
    if (downsample < 1 || (downsample & (downsample - 1)) != 0)
      throw InvalidArgument("FusionConfig: downsample must be a power of two");
    if (grid.rows % downsample != 0 || grid.cols % downsample != 0)
      throw InvalidArgument("FusionConfig: downsample must divide rows and cols");
    if (num_classes != kNumForegroundClasses)
      throw InvalidArgument("FusionConfig: num_classes must be 3");
    attention.validate();
  }
};

inline nlohmann::ordered_json attention_config_to_json(const AttentionConfig& a) {
  nlohmann::ordered_json j;
  j["num_heads"] = a.num_heads;
  j["model_dim"] = a.model_dim;
  j["head_dim"] = a.head_dim;
  j["num_layers"] = a.num_layers;
  j["dropout_rate"] = a.dropout_rate;
  return j;
}

inline AttentionConfig attention_config_from_json(const nlohmann::json& j) {
  AttentionConfig a;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "num_heads") a.num_heads = it.value().get<int64_t>();
    else if (k == "model_dim") a.model_dim = it.value().get<int64_t>();
    else if (k == "head_dim") a.head_dim = it.value().get<int64_t>();
    else if (k == "num_layers") a.num_layers = it.value().get<int64_t>();
    else if (k == "dropout_rate") a.dropout_rate = it.value().get<double>();
    else throw ParseError("AttentionConfig: unknown key " + k);
  }
  a.validate();
  return a;
}

inline nlohmann::ordered_json fusion_config_to_json(const FusionConfig& c) {
  nlohmann::ordered_json j;
  j["grid"] = grid_to_json(c.grid);
  j["downsample"] = c.downsample;
  j["attention"] = attention_config_to_json(c.attention);
  j["mode"] = fusion_mode_to_string(c.mode);
  j["num_classes"] = c.num_classes;
  return j;
}

inline FusionConfig fusion_config_from_json(const nlohmann::json& j) {
  FusionConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "grid") c.grid = grid_from_json(it.value());
    else if (k == "downsample") c.downsample = it.value().get<int64_t>();
    else if (k == "attention") c.attention = attention_config_from_json(it.value());
    else if (k == "mode") c.mode = fusion_mode_from_string(it.value().get<std::string>());
    else if (k == "num_classes") c.num_classes = it.value().get<int64_t>();
    else throw ParseError("FusionConfig: unknown key " + k);
  }
  c.validate();
  return c;
}

// --- Model ----------------------------------------------------------------

// BEV segmentation network with an SD prior injection stage. The observation
// raster is encoded to C-channel features, downsampled by stride-2 convs to
// the query grid, fused with the SD raster per the configured mode, and
// decoded back to per-cell class logits by an upsampling head.
//
// In cross_attention mode the fuse stage runs num_layers residual
// cross-attention blocks over the flattened queries; in none mode the same
// blocks run with attention disabled, leaving only the layernorm wrapper, so
// a cross-attention model with zero value projections and an all-zero SD
// raster reproduces the baseline bitwise.
template <typename T>
struct FusionModel {
  FusionConfig cfg;
  bool use_pos_embedding = true;

  Conv2d<T> enc1, enc2;
  Gelu<T> enc_g;
  std::vector<Conv2d<T>> down;
  std::vector<Gelu<T>> down_g;
  Conv2d<T> sd1, sd2;
  Gelu<T> sd_g;
  std::vector<CrossAttentionLayer<T>> attn;
  Linear<T> cat_proj;          // simply_concat
  Conv2d<T> cat1, cat2;        // cnn_concat
  Gelu<T> cat_g;
  std::vector<Conv2d<T>> up;
  std::vector<Gelu<T>> up_g;
  Conv2d<T> head;
  Tensor<T> pos;  // [num_tokens, C] sine embedding at the query grid

  FusionModel() = default;
  FusionModel(const FusionConfig& config, Rng& rng) : cfg(config) {
    cfg.validate();
    int64_t c = cfg.attention.model_dim;
    enc1 = Conv2d<T>("enc1", 3, kNumChannels, c, 1, 1, rng);
    enc2 = Conv2d<T>("enc2", 3, c, c, 1, 1, rng);
    for (int64_t i = 0; i < cfg.num_stages(); ++i) {
      down.emplace_back("down" + std::to_string(i), 3, c, c, 2, 1, rng);
      down_g.emplace_back();
    }
    sd1 = Conv2d<T>("sd1", 3, 1, c, 1, 1, rng);
    sd2 = Conv2d<T>("sd2", 3, c, c, 1, 1, rng);
    if (cfg.mode == FusionMode::cross_attention || cfg.mode == FusionMode::none) {
      bool attend = cfg.mode == FusionMode::cross_attention;
      for (int64_t l = 0; l < cfg.attention.num_layers; ++l)
        attn.emplace_back("attn" + std::to_string(l), c, c, cfg.attention.num_heads,
                          cfg.attention.head_dim, cfg.attention.dropout_rate, attend, rng);
    } else if (cfg.mode == FusionMode::simply_concat) {
      cat_proj = Linear<T>("cat_proj", 2 * c, c, true, rng);
    } else {
      cat1 = Conv2d<T>("cat1", 3, 2 * c, c, 1, 1, rng);
      cat2 = Conv2d<T>("cat2", 3, c, c, 1, 1, rng);
    }
    for (int64_t i = 0; i < cfg.num_stages(); ++i) {
      up.emplace_back("up" + std::to_string(i), 3, c, c, 1, 1, rng);
      up_g.emplace_back();
    }
    head = Conv2d<T>("head", 3, c, kNumChannels, 1, 1, rng);
    pos = sine_positional_embedding<T>(cfg.rows_small(), cfg.cols_small(), c)
              .reshaped({cfg.num_tokens(), c});
  }

  // --- Stages (each usable standalone; forward composes them) ---

  Tensor<T> encode_observation(const Tensor<T>& obs) {
    if (obs.rank() != 3 || obs.extent(0) != cfg.grid.rows || obs.extent(1) != cfg.grid.cols ||
        obs.extent(2) != kNumChannels)
      throw ShapeError("encode_observation: " + shape_str(obs.shape()) +
                       " does not match the configured grid");
    return enc2.forward(enc_g.forward(enc1.forward(obs)));
  }

  Tensor<T> downsample_bev(const Tensor<T>& b) {
    if (b.rank() != 3 || b.extent(0) != cfg.grid.rows || b.extent(1) != cfg.grid.cols ||
        b.extent(2) != cfg.attention.model_dim)
      throw ShapeError("downsample_bev: bad input " + shape_str(b.shape()));
    Tensor<T> x = b;
    for (size_t i = 0; i < down.size(); ++i) x = down_g[i].forward(down[i].forward(x));
    return x;
  }

  Tensor<T> build_queries(const Tensor<T>& b_small) {
    if (b_small.rank() != 3 || b_small.extent(0) != cfg.rows_small() ||
        b_small.extent(1) != cfg.cols_small() || b_small.extent(2) != cfg.attention.model_dim)
      throw ShapeError("build_queries: bad input " + shape_str(b_small.shape()));
    Tensor<T> q = b_small.reshaped({cfg.num_tokens(), cfg.attention.model_dim});
    if (use_pos_embedding) add_inplace(q, pos);
    return q;
  }

  Tensor<T> encode_sd(const Tensor<T>& sd_raster) {
    if (sd_raster.rank() != 3 || sd_raster.extent(0) != cfg.rows_small() ||
        sd_raster.extent(1) != cfg.cols_small() || sd_raster.extent(2) != 1)
      throw ShapeError("encode_sd: " + shape_str(sd_raster.shape()) +
                       " does not match the downsampled grid");
    return sd2.forward(sd_g.forward(sd1.forward(sd_raster)));
  }

  Tensor<T> encode_sd_tokens(const Tensor<T>& sd_raster) {
    Tensor<T> f = encode_sd(sd_raster).reshaped({cfg.num_tokens(), cfg.attention.model_dim});
    if (use_pos_embedding) add_inplace(f, pos);
    return f;
  }

  // Attention-stack fusion over flattened tokens. f_sd may have any token
  // count; in none mode it is ignored entirely.
  Tensor<T> fuse(const Tensor<T>& q_bev, const Tensor<T>& f_sd, bool train) {
    if (cfg.mode != FusionMode::cross_attention && cfg.mode != FusionMode::none)
      throw InvalidArgument("fuse: configured mode has no attention stack");
    if (q_bev.rank() != 2 || q_bev.extent(0) != cfg.num_tokens() ||
        q_bev.extent(1) != cfg.attention.model_dim)
      throw ShapeError("fuse: bad queries " + shape_str(q_bev.shape()));
    Tensor<T> x = q_bev;
    for (auto& layer : attn) x = layer.forward(x, f_sd, train);
    return x.reshaped({cfg.rows_small(), cfg.cols_small(), cfg.attention.model_dim});
  }

  Tensor<T> seg_head(const Tensor<T>& b_improved) {
    if (b_improved.rank() != 3 || b_improved.extent(0) != cfg.rows_small() ||
        b_improved.extent(1) != cfg.cols_small() ||
        b_improved.extent(2) != cfg.attention.model_dim)
      throw ShapeError("seg_head: bad input " + shape_str(b_improved.shape()));
    Tensor<T> x = b_improved;
    for (size_t i = 0; i < up.size(); ++i)
      x = up_g[i].forward(up[i].forward(upsample2x_nearest(x)));
    return head.forward(x);
  }

  // obs: [rows, cols, 4] one-hot-ish observation; sd_raster: [rows/d, cols/d, 1]
  // binary SD occupancy. Returns logits [rows, cols, 4].
  Tensor<T> forward(const Tensor<T>& obs, const Tensor<T>& sd_raster, bool train) {
    Tensor<T> b_small = downsample_bev(encode_observation(obs));
    Tensor<T> fused;
    if (cfg.mode == FusionMode::cross_attention || cfg.mode == FusionMode::none) {
      Tensor<T> q = build_queries(b_small);
      sd_used_ = cfg.mode == FusionMode::cross_attention;
      Tensor<T> mem = sd_used_ ? encode_sd_tokens(sd_raster) : Tensor<T>();
      fused = fuse(q, mem, train);
    } else {
      sd_used_ = true;
      Tensor<T> sdf = encode_sd(sd_raster);
      Tensor<T> cat = concat_channels(b_small, sdf);
      int64_t c = cfg.attention.model_dim;
      if (cfg.mode == FusionMode::simply_concat)
        fused = cat_proj.forward(cat.reshaped({cfg.num_tokens(), 2 * c}))
                    .reshaped({cfg.rows_small(), cfg.cols_small(), c});
      else
        fused = cat2.forward(cat_g.forward(cat1.forward(cat)));
    }
    return seg_head(fused);
  }

  // Accumulates parameter grads for the last forward. Input gradients are
  // discarded; obs and sd rasters are data, not parameters.
  void backward(const Tensor<T>& dlogits) {
    int64_t c = cfg.attention.model_dim;
    Tensor<T> d = head.backward(dlogits);
    for (size_t i = up.size(); i-- > 0;)
      d = upsample2x_nearest_backward(up[i].backward(up_g[i].backward(d)));
    if (cfg.mode == FusionMode::cross_attention || cfg.mode == FusionMode::none) {
      Tensor<T> dq = d.reshaped({cfg.num_tokens(), c});
      Tensor<T> dmem_sum({cfg.num_tokens(), c});
      for (size_t l = attn.size(); l-- > 0;) {
        auto grads = attn[l].backward(dq);
        dq = std::move(grads.first);
        if (grads.second.numel() > 0) add_inplace(dmem_sum, grads.second);
      }
      if (sd_used_) backward_sd(dmem_sum.reshaped({cfg.rows_small(), cfg.cols_small(), c}));
      d = dq.reshaped({cfg.rows_small(), cfg.cols_small(), c});
    } else {
      Tensor<T> dcat;
      if (cfg.mode == FusionMode::simply_concat)
        dcat = cat_proj.backward(d.reshaped({cfg.num_tokens(), c}))
                   .reshaped({cfg.rows_small(), cfg.cols_small(), 2 * c});
      else
        dcat = cat1.backward(cat_g.backward(cat2.backward(d)));
      Tensor<T> dbs, dsdf;
      split_channels(dcat, c, dbs, dsdf);
      backward_sd(dsdf);
      d = dbs;
    }
    for (size_t i = down.size(); i-- > 0;) d = down[i].backward(down_g[i].backward(d));
    enc1.backward(enc_g.backward(enc2.backward(d)));
  }

  void sample_noise(Rng& rng) {
    for (auto& layer : attn)
      layer.sample_noise(cfg.num_tokens(), cfg.attention.model_dim, rng);
  }

  void params(ParamRefs<T>& out) {
    enc1.params(out);
    enc2.params(out);
    for (auto& l : down) l.params(out);
    sd1.params(out);
    sd2.params(out);
    for (auto& l : attn) l.params(out);
    if (cfg.mode == FusionMode::simply_concat) cat_proj.params(out);
    if (cfg.mode == FusionMode::cnn_concat) {
      cat1.params(out);
      cat2.params(out);
    }
    for (auto& l : up) l.params(out);
    head.params(out);
  }

 private:
  bool sd_used_ = false;

  void backward_sd(const Tensor<T>& dsdf) {
    sd1.backward(sd_g.backward(sd2.backward(dsdf)));
  }
};

// --- Training -------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  std::array<double, kNumForegroundClasses> iou{};
  double miou = 0.0;
};

namespace detail {

template <typename T>
inline Tensor<T> to_tensor(const Tensor<float>& x) {
  Tensor<T> y(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = static_cast<T>(x[i]);
  return y;
}

template <typename T>
inline void accumulate_argmax_iou(const Tensor<T>& logits, const std::vector<uint8_t>& gt,
                                  std::array<int64_t, kNumForegroundClasses>& inter,
                                  std::array<int64_t, kNumForegroundClasses>& uni) {
  int64_t cells = logits.extent(0) * logits.extent(1);
  for (int64_t i = 0; i < cells; ++i) {
    const T* row = logits.data() + i * kNumChannels;
    int best = 0;
    for (int k = 1; k < kNumChannels; ++k)
      if (row[k] > row[best]) best = k;
    int y = gt[static_cast<size_t>(i)];
    for (int k = 0; k < kNumForegroundClasses; ++k) {
      inter[static_cast<size_t>(k)] += (best == k) && (y == k);
      uni[static_cast<size_t>(k)] += (best == k) || (y == k);
    }
  }
}

inline std::pair<std::array<double, kNumForegroundClasses>, double> pooled_iou(
    const std::array<int64_t, kNumForegroundClasses>& inter,
    const std::array<int64_t, kNumForegroundClasses>& uni) {
  std::array<double, kNumForegroundClasses> iou{};
  double sum = 0.0;
  for (size_t k = 0; k < kNumForegroundClasses; ++k) {
    iou[k] = uni[k] == 0 ? 1.0 : static_cast<double>(inter[k]) / static_cast<double>(uni[k]);
    sum += iou[k];
  }
  return {iou, sum / kNumForegroundClasses};
}

}  // namespace detail

// Pooled per-class IoU of argmax predictions against labels over a scene set.
template <typename T>
inline std::pair<std::array<double, kNumForegroundClasses>, double> fusion_iou(
    FusionModel<T>& model, const std::vector<Scene>& scenes) {
  std::array<int64_t, kNumForegroundClasses> inter{}, uni{};
  for (const Scene& sc : scenes) {
    Tensor<T> obs = detail::to_tensor<T>(sc.obs);
    Tensor<T> sd = rasterize_sd<T>(sc.sd, model.cfg.grid, model.cfg.downsample);
    Tensor<T> logits = model.forward(obs, sd, false);
    detail::accumulate_argmax_iou(logits, channels_to_labels(sc.gt.values), inter, uni);
  }
  return detail::pooled_iou(inter, uni);
}

// Adam on pixel-wise cross entropy of the logits against GT labels. Scenes
// are visited in order each epoch; the only stochasticity is the dropout
// noise drawn from `seed`, so runs are reproducible. The returned log has
// one entry per epoch with the mean train loss and the pooled train IoU; the
// same rows stream to `csv` when given.
template <typename T>
inline std::vector<EpochLog> train_fusion(FusionModel<T>& model, const std::vector<Scene>& scenes,
                                          int epochs, double lr, uint64_t seed,
                                          std::ostream* csv = nullptr,
                                          std::vector<double> class_weights = {}) {
  if (scenes.empty()) throw InvalidArgument("train_fusion: empty dataset");
  if (epochs < 1) throw InvalidArgument("train_fusion: epochs must be >= 1");
  const GridSpec& grid = model.cfg.grid;
  int64_t cells = grid.rows * grid.cols;
  if (class_weights.empty()) class_weights.assign(kNumChannels, 1.0);

  struct Prepared {
    Tensor<T> obs, sd;
    std::vector<uint8_t> labels;
  };
  std::vector<Prepared> prep;
  prep.reserve(scenes.size());
  for (const Scene& sc : scenes) {
    if (!(sc.gt.grid == grid))
      throw ShapeError("train_fusion: scene grid does not match the model");
    prep.push_back({detail::to_tensor<T>(sc.obs),
                    rasterize_sd<T>(sc.sd, grid, model.cfg.downsample),
                    channels_to_labels(sc.gt.values)});
  }

  ParamRefs<T> ps;
  model.params(ps);
  Adam<T> opt(ps, lr);
  Rng rng(seed);
  std::vector<EpochLog> logs;
  if (csv) *csv << "epoch,loss,iou_divider,iou_ped_crossing,iou_boundary,miou\n";

  for (int e = 1; e <= epochs; ++e) {
    double loss_sum = 0.0;
    for (const Prepared& p : prep) {
      model.sample_noise(rng);
      Tensor<T> logits = model.forward(p.obs, p.sd, true);
      Tensor<T> dflat;
      double loss = cross_entropy(logits.reshaped({cells, kNumChannels}), p.labels,
                                  class_weights, &dflat);
      if (!std::isfinite(loss)) throw NumericError("train_fusion: non-finite loss");
      loss_sum += loss;
      zero_grads(ps);
      model.backward(dflat.reshaped({grid.rows, grid.cols, kNumChannels}));
      opt.step();
    }
    EpochLog log;
    log.epoch = e;
    log.loss = loss_sum / static_cast<double>(prep.size());
    auto [iou, miou] = fusion_iou(model, scenes);
    log.iou = iou;
    log.miou = miou;
    if (csv)
      *csv << e << ',' << log.loss << ',' << iou[0] << ',' << iou[1] << ',' << iou[2] << ','
           << miou << '\n';
    logs.push_back(log);
  }
  return logs;
}

template <typename T>
inline std::vector<EpochLog> train_fusion(FusionModel<T>& model, const Dataset& data, int epochs,
                                          double lr, uint64_t seed, std::ostream* csv = nullptr,
                                          std::vector<double> class_weights = {}) {
  return train_fusion(model, data.scenes, epochs, lr, seed, csv, std::move(class_weights));
}

}  // namespace pmap
