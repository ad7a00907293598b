#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "pmap/fusion.hpp"

namespace pmap {

// --- Masking --------------------------------------------------------------

enum class MaskStrategy { grid, random };

inline std::string mask_strategy_to_string(MaskStrategy s) {
  return s == MaskStrategy::grid ? "grid" : "random";
}

inline MaskStrategy mask_strategy_from_string(const std::string& s) {
  if (s == "grid") return MaskStrategy::grid;
  if (s == "random") return MaskStrategy::random;
  throw ParseError("unknown mask strategy: " + s);
}

// Grid strategy: checkerboard over grid_patch tiles, masking one of every
// two. Random strategy: one patch size drawn per mask from the candidates,
// tiles masked in a shuffled order until the masked fraction first reaches
// mask_proportion. Edge tiles are truncated at the raster boundary.
struct MaskSpec {
  MaskStrategy strategy = MaskStrategy::grid;
  int64_t grid_patch_rows = 20, grid_patch_cols = 20;
  std::vector<std::pair<int64_t, int64_t>> random_patch_candidates = {
      {20, 20}, {20, 40}, {25, 50}, {40, 80}};
  double mask_proportion = 0.5;
  uint64_t seed = 0;

  void validate() const {
    if (grid_patch_rows < 1 || grid_patch_cols < 1)
      throw InvalidArgument("MaskSpec: grid patch dims must be >= 1");
    if (random_patch_candidates.empty())
      throw InvalidArgument("MaskSpec: need at least one random patch candidate");
    for (const auto& [pr, pc] : random_patch_candidates)
      if (pr < 1 || pc < 1) throw InvalidArgument("MaskSpec: candidate dims must be >= 1");
    if (!(mask_proportion >= 0.0 && mask_proportion <= 1.0))
      throw InvalidArgument("MaskSpec: mask_proportion must be in [0, 1]");
  }
};

inline nlohmann::ordered_json mask_spec_to_json(const MaskSpec& m) {
  nlohmann::ordered_json j;
  j["strategy"] = mask_strategy_to_string(m.strategy);
  j["grid_patch"] = {m.grid_patch_rows, m.grid_patch_cols};
  nlohmann::ordered_json cands = nlohmann::ordered_json::array();
  for (const auto& [pr, pc] : m.random_patch_candidates) cands.push_back({pr, pc});
  j["random_patch_candidates"] = cands;
  j["mask_proportion"] = m.mask_proportion;
  j["seed"] = m.seed;
  return j;
}

inline MaskSpec mask_spec_from_json(const nlohmann::json& j) {
  MaskSpec m;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "strategy") m.strategy = mask_strategy_from_string(it.value().get<std::string>());
    else if (k == "grid_patch") {
      auto v = it.value().get<std::vector<int64_t>>();
      if (v.size() != 2) throw ParseError("MaskSpec: grid_patch wants [rows, cols]");
      m.grid_patch_rows = v[0];
      m.grid_patch_cols = v[1];
    } else if (k == "random_patch_candidates") {
      m.random_patch_candidates.clear();
      for (const auto& c : it.value()) {
        auto v = c.get<std::vector<int64_t>>();
        if (v.size() != 2) throw ParseError("MaskSpec: candidate wants [rows, cols]");
        m.random_patch_candidates.emplace_back(v[0], v[1]);
      }
    } else if (k == "mask_proportion") m.mask_proportion = it.value().get<double>();
    else if (k == "seed") m.seed = it.value().get<uint64_t>();
    else throw ParseError("MaskSpec: unknown key " + k);
  }
  m.validate();
  return m;
}

// Binary mask over the raster, 1 = masked. Deterministic in the rng state.
inline Tensor<uint8_t> make_mask(const MaskSpec& spec, const GridSpec& grid, Rng& rng) {
  spec.validate();
  Tensor<uint8_t> mask({grid.rows, grid.cols});
  if (spec.strategy == MaskStrategy::grid) {
    for (int64_t r = 0; r < grid.rows; ++r)
      for (int64_t c = 0; c < grid.cols; ++c)
        mask[r * grid.cols + c] =
            static_cast<uint8_t>((r / spec.grid_patch_rows + c / spec.grid_patch_cols) % 2);
    return mask;
  }
  const auto& cand =
      spec.random_patch_candidates[rng.uniform_index(spec.random_patch_candidates.size())];
  int64_t pr = cand.first, pc = cand.second;
  int64_t tr = (grid.rows + pr - 1) / pr, tc = (grid.cols + pc - 1) / pc;
  std::vector<int64_t> order(static_cast<size_t>(tr * tc));
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
  for (size_t i = order.size(); i-- > 1;)
    std::swap(order[i], order[rng.uniform_index(i + 1)]);
  double target = spec.mask_proportion * static_cast<double>(grid.rows * grid.cols);
  int64_t masked = 0;
  for (int64_t tile : order) {
    if (static_cast<double>(masked) >= target) break;
    int64_t r0 = (tile / tc) * pr, c0 = (tile % tc) * pc;
    int64_t r1 = std::min(grid.rows, r0 + pr), c1 = std::min(grid.cols, c0 + pc);
    for (int64_t r = r0; r < r1; ++r)
      for (int64_t c = c0; c < c1; ++c) mask[r * grid.cols + c] = 1;
    masked += (r1 - r0) * (c1 - c0);
  }
  return mask;
}

inline Tensor<uint8_t> make_mask(const MaskSpec& spec, const GridSpec& grid) {
  Rng rng(spec.seed);
  return make_mask(spec, grid, rng);
}

// Masked cells become background one-hot; the rest pass through.
inline SemanticRaster apply_mask(const SemanticRaster& raster, const Tensor<uint8_t>& mask) {
  if (mask.rank() != 2 || mask.extent(0) != raster.grid.rows ||
      mask.extent(1) != raster.grid.cols)
    throw ShapeError("apply_mask: mask " + shape_str(mask.shape()) + " does not match grid");
  SemanticRaster out = raster;
  for (int64_t i = 0; i < raster.grid.rows * raster.grid.cols; ++i) {
    if (!mask[i]) continue;
    for (int k = 0; k < kNumChannels; ++k)
      out.values[i * kNumChannels + k] = k == kBackground ? 1.0f : 0.0f;
  }
  return out;
}

// --- Model ----------------------------------------------------------------

struct MaeConfig {
  GridSpec grid;
  int64_t patch = 8;  // cells per patch side
  int64_t dim = 64;
  int64_t depth = 4;
  int64_t heads = 4;
  int64_t mlp_hidden = 256;
  int64_t head_channels = 16;
  double dropout = 0.0;

  int64_t rows_pad() const { return (grid.rows + patch - 1) / patch * patch; }
  int64_t cols_pad() const { return (grid.cols + patch - 1) / patch * patch; }
  int64_t token_rows() const { return rows_pad() / patch; }
  int64_t token_cols() const { return cols_pad() / patch; }
  int64_t num_tokens() const { return token_rows() * token_cols(); }

  void validate() const {
    if (grid.rows < 1 || grid.cols < 1 || grid.resolution_m <= 0.0)
      throw InvalidArgument("MaeConfig: grid is not set");
    if (patch < 1) throw InvalidArgument("MaeConfig: patch must be >= 1");
    if (dim < 4 || dim % 4 != 0) throw InvalidArgument("MaeConfig: dim must be a multiple of 4");
    if (heads < 1 || dim % heads != 0)
      throw InvalidArgument("MaeConfig: heads must divide dim");
    if (depth < 1) throw InvalidArgument("MaeConfig: depth must be >= 1");
    if (mlp_hidden < 1 || head_channels < 1)
      throw InvalidArgument("MaeConfig: hidden sizes must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw InvalidArgument("MaeConfig: dropout must be in [0, 1)");
  }
};

inline nlohmann::ordered_json mae_config_to_json(const MaeConfig& c) {
  nlohmann::ordered_json j;
  j["grid"] = grid_to_json(c.grid);
  j["patch"] = c.patch;
  j["dim"] = c.dim;
  j["depth"] = c.depth;
  j["heads"] = c.heads;
  j["mlp_hidden"] = c.mlp_hidden;
  j["head_channels"] = c.head_channels;
  j["dropout"] = c.dropout;
  return j;
}

inline MaeConfig mae_config_from_json(const nlohmann::json& j) {
  MaeConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "grid") c.grid = grid_from_json(it.value());
    else if (k == "patch") c.patch = it.value().get<int64_t>();
    else if (k == "dim") c.dim = it.value().get<int64_t>();
    else if (k == "depth") c.depth = it.value().get<int64_t>();
    else if (k == "heads") c.heads = it.value().get<int64_t>();
    else if (k == "mlp_hidden") c.mlp_hidden = it.value().get<int64_t>();
    else if (k == "head_channels") c.head_channels = it.value().get<int64_t>();
    else if (k == "dropout") c.dropout = it.value().get<double>();
    else throw ParseError("MaeConfig: unknown key " + k);
  }
  c.validate();
  return c;
}

namespace detail {

// [h, w, c] -> [h/p * w/p, p*p*c], patch-major, (py, px, ci) inside a patch.
template <typename T>
inline Tensor<T> to_patches(const Tensor<T>& img, int64_t p) {
  int64_t h = img.extent(0), w = img.extent(1), c = img.extent(2);
  int64_t th = h / p, tw = w / p;
  Tensor<T> out({th * tw, p * p * c});
  for (int64_t t = 0; t < th * tw; ++t) {
    int64_t r0 = (t / tw) * p, c0 = (t % tw) * p;
    for (int64_t py = 0; py < p; ++py)
      for (int64_t px = 0; px < p; ++px)
        for (int64_t ci = 0; ci < c; ++ci)
          out[t * p * p * c + (py * p + px) * c + ci] =
              img[((r0 + py) * w + c0 + px) * c + ci];
  }
  return out;
}

template <typename T>
inline Tensor<T> from_patches(const Tensor<T>& pt, int64_t th, int64_t tw, int64_t p,
                              int64_t c) {
  Tensor<T> img({th * p, tw * p, c});
  for (int64_t t = 0; t < th * tw; ++t) {
    int64_t r0 = (t / tw) * p, c0 = (t % tw) * p;
    for (int64_t py = 0; py < p; ++py)
      for (int64_t px = 0; px < p; ++px)
        for (int64_t ci = 0; ci < c; ++ci)
          img[((r0 + py) * tw * p + c0 + px) * c + ci] =
              pt[t * p * p * c + (py * p + px) * c + ci];
  }
  return img;
}

}  // namespace detail

// ViT-style masked autoencoder over class-probability rasters: patch embed
// plus sine positions, pre-norm transformer blocks, a linear decoder back to
// patch pixels, and a small conv segmentation head. Rasters whose dims are
// not patch multiples are padded with background and cropped on the way out.
template <typename T>
struct MaeModel {
  MaeConfig cfg;
  Linear<T> embed;
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> ln_f;
  Linear<T> decoder;
  Conv2d<T> head1, head2;
  Gelu<T> head_g;
  Tensor<T> pos;  // [num_tokens, dim]

  MaeModel() = default;
  MaeModel(const MaeConfig& config, Rng& rng) : cfg(config) {
    cfg.validate();
    int64_t pvec = cfg.patch * cfg.patch;
    embed = Linear<T>("embed", pvec * kNumChannels, cfg.dim, true, rng);
    for (int64_t i = 0; i < cfg.depth; ++i)
      blocks.emplace_back("blk" + std::to_string(i), cfg.dim, cfg.heads, cfg.dim / cfg.heads,
                          cfg.mlp_hidden, cfg.dropout, rng);
    ln_f = LayerNorm<T>("ln_f", cfg.dim);
    decoder = Linear<T>("decoder", cfg.dim, pvec * cfg.head_channels, true, rng);
    head1 = Conv2d<T>("mae_head1", 3, cfg.head_channels, cfg.head_channels, 1, 1, rng);
    head2 = Conv2d<T>("mae_head2", 3, cfg.head_channels, kNumChannels, 1, 1, rng);
    pos = sine_positional_embedding<T>(cfg.token_rows(), cfg.token_cols(), cfg.dim)
              .reshaped({cfg.num_tokens(), cfg.dim});
  }

  // x: [rows, cols, 4] class scores. Returns logits [rows, cols, 4].
  Tensor<T> forward(const Tensor<T>& x, bool train) {
    if (x.rank() != 3 || x.extent(0) != cfg.grid.rows || x.extent(1) != cfg.grid.cols ||
        x.extent(2) != kNumChannels)
      throw ShapeError("mae forward: " + shape_str(x.shape()) +
                       " does not match the configured grid");
    int64_t hp = cfg.rows_pad(), wp = cfg.cols_pad();
    Tensor<T> xp({hp, wp, kNumChannels});
    for (int64_t r = 0; r < hp; ++r)
      for (int64_t c = 0; c < wp; ++c) {
        T* dst = xp.data() + (r * wp + c) * kNumChannels;
        if (r < cfg.grid.rows && c < cfg.grid.cols) {
          const T* src = x.data() + (r * cfg.grid.cols + c) * kNumChannels;
          std::copy(src, src + kNumChannels, dst);
        } else {
          dst[kBackground] = T(1);
        }
      }
    Tensor<T> tok = embed.forward(detail::to_patches(xp, cfg.patch));
    add_inplace(tok, pos);
    for (auto& b : blocks) tok = b.forward(tok, train);
    tok = ln_f.forward(tok);
    Tensor<T> dec = decoder.forward(tok);
    Tensor<T> f = detail::from_patches(dec, cfg.token_rows(), cfg.token_cols(), cfg.patch,
                                       cfg.head_channels);
    Tensor<T> y = head2.forward(head_g.forward(head1.forward(f)));
    Tensor<T> out({cfg.grid.rows, cfg.grid.cols, kNumChannels});
    for (int64_t r = 0; r < cfg.grid.rows; ++r)
      std::copy(y.data() + r * wp * kNumChannels,
                y.data() + (r * wp + cfg.grid.cols) * kNumChannels,
                out.data() + r * cfg.grid.cols * kNumChannels);
    return out;
  }

  // Returns the gradient with respect to the input raster, so an upstream
  // stack can be fine-tuned through this model.
  Tensor<T> backward(const Tensor<T>& dlogits) {
    int64_t hp = cfg.rows_pad(), wp = cfg.cols_pad();
    Tensor<T> dy({hp, wp, kNumChannels});
    for (int64_t r = 0; r < cfg.grid.rows; ++r)
      std::copy(dlogits.data() + r * cfg.grid.cols * kNumChannels,
                dlogits.data() + (r + 1) * cfg.grid.cols * kNumChannels,
                dy.data() + r * wp * kNumChannels);
    Tensor<T> df = head1.backward(head_g.backward(head2.backward(dy)));
    Tensor<T> dt = decoder.backward(detail::to_patches(df, cfg.patch));
    dt = ln_f.backward(dt);
    for (size_t i = blocks.size(); i-- > 0;) dt = blocks[i].backward(dt);
    Tensor<T> dxp = detail::from_patches(embed.backward(dt), cfg.token_rows(),
                                         cfg.token_cols(), cfg.patch, kNumChannels);
    Tensor<T> dx({cfg.grid.rows, cfg.grid.cols, kNumChannels});
    for (int64_t r = 0; r < cfg.grid.rows; ++r)
      std::copy(dxp.data() + r * wp * kNumChannels,
                dxp.data() + (r * wp + cfg.grid.cols) * kNumChannels,
                dx.data() + r * cfg.grid.cols * kNumChannels);
    return dx;
  }

  // Refinement: per-cell softmax of the incoming logits, then the MAE pass.
  Tensor<T> refine_forward(const Tensor<T>& logits, bool train) {
    if (logits.rank() != 3 || logits.extent(0) != cfg.grid.rows ||
        logits.extent(1) != cfg.grid.cols || logits.extent(2) != kNumChannels)
      throw ShapeError("refine: " + shape_str(logits.shape()) +
                       " does not match the configured grid");
    probs_cache_ =
        softmax_rows(logits.reshaped({cfg.grid.rows * cfg.grid.cols, kNumChannels}));
    return forward(probs_cache_.reshaped({cfg.grid.rows, cfg.grid.cols, kNumChannels}), train);
  }

  // Gradient with respect to the pre-softmax logits fed to refine_forward.
  Tensor<T> refine_backward(const Tensor<T>& dout) {
    int64_t cells = cfg.grid.rows * cfg.grid.cols;
    Tensor<T> dp = backward(dout).reshaped({cells, kNumChannels});
    Tensor<T> dx = softmax_rows_backward(probs_cache_, dp);
    return dx.reshaped({cfg.grid.rows, cfg.grid.cols, kNumChannels});
  }

  void sample_noise(Rng& rng) {
    for (auto& b : blocks) b.sample_noise(cfg.num_tokens(), cfg.dim, rng);
  }

  void params(ParamRefs<T>& out) {
    embed.params(out);
    for (auto& b : blocks) b.params(out);
    ln_f.params(out);
    decoder.params(out);
    head1.params(out);
    head2.params(out);
  }

 private:
  Tensor<T> probs_cache_;  // [cells, 4]
};

template <typename T>
inline Tensor<T> refine(const Tensor<T>& x_init_logits, MaeModel<T>& model) {
  return model.refine_forward(x_init_logits, false);
}

// Argmax agreement with the ground truth over the masked cells only.
template <typename T>
inline double masked_accuracy(MaeModel<T>& model, const SemanticRaster& map,
                              const Tensor<uint8_t>& mask) {
  SemanticRaster masked = apply_mask(map, mask);
  Tensor<T> logits = model.forward(detail::to_tensor<T>(masked.values), false);
  std::vector<uint8_t> gt = channels_to_labels(map.values);
  int64_t hit = 0, total = 0;
  for (int64_t i = 0; i < map.grid.rows * map.grid.cols; ++i) {
    if (!mask[i]) continue;
    const T* row = logits.data() + i * kNumChannels;
    int best = 0;
    for (int k = 1; k < kNumChannels; ++k)
      if (row[k] > row[best]) best = k;
    hit += best == gt[static_cast<size_t>(i)];
    ++total;
  }
  return total == 0 ? 1.0 : static_cast<double>(hit) / static_cast<double>(total);
}

// --- Training -------------------------------------------------------------

// Self-supervised pretraining: cross entropy of the reconstruction against
// the unmasked ground truth, with a fresh mask per sample per epoch. The
// logged IoU is the unmasked autoencoding fidelity, the property refinement
// relies on.
template <typename T>
inline std::vector<EpochLog> pretrain_mae(MaeModel<T>& model,
                                          const std::vector<SemanticRaster>& maps,
                                          const MaskSpec& mask_spec, int epochs, double lr,
                                          uint64_t seed, std::ostream* csv = nullptr) {
  if (maps.empty()) throw InvalidArgument("pretrain_mae: empty dataset");
  if (epochs < 1) throw InvalidArgument("pretrain_mae: epochs must be >= 1");
  const GridSpec& grid = model.cfg.grid;
  int64_t cells = grid.rows * grid.cols;
  std::vector<double> weights(kNumChannels, 1.0);

  struct Prepared {
    Tensor<T> clean;
    std::vector<uint8_t> labels;
  };
  std::vector<Prepared> prep;
  for (const SemanticRaster& m : maps) {
    if (!(m.grid == grid)) throw ShapeError("pretrain_mae: map grid does not match the model");
    prep.push_back({detail::to_tensor<T>(m.values), channels_to_labels(m.values)});
  }

  ParamRefs<T> ps;
  model.params(ps);
  Adam<T> opt(ps, lr);
  Rng rng(seed);
  std::vector<EpochLog> logs;
  if (csv) *csv << "epoch,loss,iou_divider,iou_ped_crossing,iou_boundary,miou\n";

  for (int e = 1; e <= epochs; ++e) {
    double loss_sum = 0.0;
    for (size_t i = 0; i < maps.size(); ++i) {
      Tensor<uint8_t> mask = make_mask(mask_spec, grid, rng);
      SemanticRaster masked = apply_mask(maps[i], mask);
      model.sample_noise(rng);
      Tensor<T> logits = model.forward(detail::to_tensor<T>(masked.values), true);
      Tensor<T> dflat;
      double loss = cross_entropy(logits.reshaped({cells, kNumChannels}), prep[i].labels,
                                  weights, &dflat);
      if (!std::isfinite(loss)) throw NumericError("pretrain_mae: non-finite loss");
      loss_sum += loss;
      zero_grads(ps);
      model.backward(dflat.reshaped({grid.rows, grid.cols, kNumChannels}));
      opt.step();
    }
    EpochLog log;
    log.epoch = e;
    log.loss = loss_sum / static_cast<double>(maps.size());
    std::array<int64_t, kNumForegroundClasses> inter{}, uni{};
    for (size_t i = 0; i < prep.size(); ++i)
      detail::accumulate_argmax_iou(model.forward(prep[i].clean, false), prep[i].labels, inter,
                                    uni);
    auto [iou, miou] = detail::pooled_iou(inter, uni);
    log.iou = iou;
    log.miou = miou;
    if (csv)
      *csv << e << ',' << log.loss << ',' << iou[0] << ',' << iou[1] << ',' << iou[2] << ','
           << miou << '\n';
    logs.push_back(log);
  }
  return logs;
}

// Pooled IoU of the refined pipeline (fusion then MAE) on a scene set.
template <typename T>
inline std::pair<std::array<double, kNumForegroundClasses>, double> refined_iou(
    FusionModel<T>& fusion, MaeModel<T>& mae, const std::vector<Scene>& scenes) {
  std::array<int64_t, kNumForegroundClasses> inter{}, uni{};
  for (const Scene& sc : scenes) {
    Tensor<T> obs = detail::to_tensor<T>(sc.obs);
    Tensor<T> sd = rasterize_sd<T>(sc.sd, fusion.cfg.grid, fusion.cfg.downsample);
    Tensor<T> refined = mae.refine_forward(fusion.forward(obs, sd, false), false);
    detail::accumulate_argmax_iou(refined, channels_to_labels(sc.gt.values), inter, uni);
  }
  return detail::pooled_iou(inter, uni);
}

// Joint fine-tuning per the refinement equation: cross entropy on the
// refined logits, gradients through both stacks unless the fusion side is
// frozen.
template <typename T>
inline std::vector<EpochLog> finetune(FusionModel<T>& fusion, MaeModel<T>& mae,
                                      const std::vector<Scene>& scenes, int epochs, double lr,
                                      uint64_t seed, std::ostream* csv = nullptr,
                                      bool freeze_fusion = false,
                                      std::vector<double> class_weights = {}) {
  if (scenes.empty()) throw InvalidArgument("finetune: empty dataset");
  if (epochs < 1) throw InvalidArgument("finetune: epochs must be >= 1");
  if (!(fusion.cfg.grid == mae.cfg.grid))
    throw InvalidArgument("finetune: fusion and mae grids differ");
  const GridSpec& grid = fusion.cfg.grid;
  int64_t cells = grid.rows * grid.cols;
  if (class_weights.empty()) class_weights.assign(kNumChannels, 1.0);

  struct Prepared {
    Tensor<T> obs, sd;
    std::vector<uint8_t> labels;
  };
  std::vector<Prepared> prep;
  for (const Scene& sc : scenes) {
    if (!(sc.gt.grid == grid)) throw ShapeError("finetune: scene grid does not match");
    prep.push_back({detail::to_tensor<T>(sc.obs),
                    rasterize_sd<T>(sc.sd, grid, fusion.cfg.downsample),
                    channels_to_labels(sc.gt.values)});
  }

  ParamRefs<T> ps;
  mae.params(ps);
  if (!freeze_fusion) fusion.params(ps);
  Adam<T> opt(ps, lr);
  Rng rng(seed);
  std::vector<EpochLog> logs;
  if (csv) *csv << "epoch,loss,iou_divider,iou_ped_crossing,iou_boundary,miou\n";

  for (int e = 1; e <= epochs; ++e) {
    double loss_sum = 0.0;
    for (const Prepared& p : prep) {
      if (!freeze_fusion) fusion.sample_noise(rng);
      mae.sample_noise(rng);
      Tensor<T> x_init = fusion.forward(p.obs, p.sd, !freeze_fusion);
      Tensor<T> refined = mae.refine_forward(x_init, true);
      Tensor<T> dflat;
      double loss = cross_entropy(refined.reshaped({cells, kNumChannels}), p.labels,
                                  class_weights, &dflat);
      if (!std::isfinite(loss)) throw NumericError("finetune: non-finite loss");
      loss_sum += loss;
      zero_grads(ps);
      Tensor<T> dx_init = mae.refine_backward(dflat.reshaped({grid.rows, grid.cols,
                                                              kNumChannels}));
      if (!freeze_fusion) fusion.backward(dx_init);
      opt.step();
    }
    EpochLog log;
    log.epoch = e;
    log.loss = loss_sum / static_cast<double>(prep.size());
    auto [iou, miou] = refined_iou(fusion, mae, scenes);
    log.iou = iou;
    log.miou = miou;
    if (csv)
      *csv << e << ',' << log.loss << ',' << iou[0] << ',' << iou[1] << ',' << iou[2] << ','
           << miou << '\n';
    logs.push_back(log);
  }
  return logs;
}

}  // namespace pmap
