#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <vector>

#include "pmap/grad_check.hpp"
#include "pmap/mae.hpp"

using namespace pmap;

namespace {

// Checkerboard oracle built from explicit tile rectangles.
int64_t checkerboard_masked_cells(int64_t rows, int64_t cols, int64_t pr, int64_t pc) {
  int64_t total = 0;
  for (int64_t i = 0, r0 = 0; r0 < rows; ++i, r0 += pr)
    for (int64_t j = 0, c0 = 0; c0 < cols; ++j, c0 += pc)
      if ((i + j) % 2 == 1)
        total += (std::min(rows, r0 + pr) - r0) * (std::min(cols, c0 + pc) - c0);
  return total;
}

double masked_fraction(const Tensor<uint8_t>& mask) {
  int64_t on = 0;
  for (int64_t i = 0; i < mask.numel(); ++i) on += mask[i];
  return static_cast<double>(on) / static_cast<double>(mask.numel());
}

SemanticRaster striped_raster(const GridSpec& grid) {
  std::vector<Polyline> polys;
  Polyline a;
  a.class_id = kDivider;
  a.points = {{-grid.half_forward(), 0.0}, {grid.half_forward(), 0.0}};
  Polyline b;
  b.class_id = kBoundary;
  b.points = {{-grid.half_forward(), grid.half_lateral() / 2.0},
              {grid.half_forward(), grid.half_lateral() / 2.0}};
  polys = {a, b};
  return to_semantic(rasterize_labels(polys, grid, gt_thickness_for(grid)));
}

template <typename T>
Tensor<T> random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor<T> t(s);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(-scale, scale));
  return t;
}

std::vector<uint8_t> random_labels(int64_t n, Rng& rng) {
  std::vector<uint8_t> y(static_cast<size_t>(n));
  for (auto& v : y) v = static_cast<uint8_t>(rng.uniform_index(kNumChannels));
  return y;
}

MaeConfig tiny_mae(const GridSpec& grid, int64_t patch, int64_t dim, int64_t depth,
                   int64_t heads, int64_t hidden, int64_t hc) {
  MaeConfig cfg;
  cfg.grid = grid;
  cfg.patch = patch;
  cfg.dim = dim;
  cfg.depth = depth;
  cfg.heads = heads;
  cfg.mlp_hidden = hidden;
  cfg.head_channels = hc;
  cfg.dropout = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("mask specs validate and round trip through json", "[mae]") {
  MaskSpec spec;
  spec.validate();
  SECTION("round trip") {
    spec.strategy = MaskStrategy::random;
    spec.mask_proportion = 0.25;
    spec.seed = 77;
    spec.random_patch_candidates = {{10, 10}, {5, 20}};
    MaskSpec back = mask_spec_from_json(mask_spec_to_json(spec));
    CHECK(back.strategy == MaskStrategy::random);
    CHECK(back.mask_proportion == 0.25);
    CHECK(back.seed == 77);
    REQUIRE(back.random_patch_candidates.size() == 2);
    CHECK(back.random_patch_candidates[1] == std::make_pair<int64_t, int64_t>(5, 20));
  }
  SECTION("unknown key and bad strategy rejected") {
    nlohmann::json j = mask_spec_to_json(spec);
    j["ratio"] = 0.5;
    CHECK_THROWS_AS(mask_spec_from_json(j), ParseError);
    nlohmann::json j2 = mask_spec_to_json(spec);
    j2["strategy"] = "checker";
    CHECK_THROWS_AS(mask_spec_from_json(j2), ParseError);
  }
  SECTION("invalid fields rejected") {
    MaskSpec bad = spec;
    bad.mask_proportion = 1.5;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = spec;
    bad.grid_patch_rows = 0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = spec;
    bad.random_patch_candidates.clear();
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  }
}

TEST_CASE("grid masks form an exact checkerboard", "[mae]") {
  MaskSpec spec;  // grid strategy, 20x20 patches
  SECTION("40x40 grid is half masked in alternating patches") {
    GridSpec grid = grid_for_range(4.0, 4.0, 0.1);
    Tensor<uint8_t> mask = make_mask(spec, grid);
    CHECK(masked_fraction(mask) == 0.5);
    CHECK(mask[0] == 0);                   // patch (0,0) kept
    CHECK(mask[20] == 1);                  // patch (0,1) masked
    CHECK(mask[20 * 40] == 1);             // patch (1,0) masked
    CHECK(mask[20 * 40 + 20] == 0);        // patch (1,1) kept
    for (int64_t r = 0; r < 40; ++r)
      for (int64_t c = 0; c < 40; ++c)
        REQUIRE(mask[r * 40 + c] == ((r / 20 + c / 20) % 2));
  }
  SECTION("whole multiples of 40 per side are exactly half masked") {
    for (auto [f, l] : {std::pair{12.0, 8.0}, std::pair{4.0, 16.0}}) {
      GridSpec grid = grid_for_range(f, l, 0.1);
      REQUIRE(grid.rows % 40 == 0);
      REQUIRE(grid.cols % 40 == 0);
      CHECK(masked_fraction(make_mask(spec, grid)) == 0.5);
    }
  }
  SECTION("edge patches truncate against the raster boundary") {
    GridSpec grid = grid_for_range(3.0, 5.0, 0.1);  // 50 rows x 30 cols
    Tensor<uint8_t> mask = make_mask(spec, grid);
    int64_t on = 0;
    for (int64_t i = 0; i < mask.numel(); ++i) on += mask[i];
    CHECK(on == checkerboard_masked_cells(50, 30, 20, 20));
    CHECK(on > 0);
  }
}

TEST_CASE("random masks respect the stopping rule", "[mae]") {
  GridSpec grid = grid_for_range(10.0, 20.0, 0.1);  // 200 rows x 100 cols
  MaskSpec spec;
  spec.strategy = MaskStrategy::random;
  SECTION("proportion zero gives an empty mask") {
    spec.mask_proportion = 0.0;
    spec.seed = 3;
    CHECK(masked_fraction(make_mask(spec, grid)) == 0.0);
  }
  SECTION("fixed seed reproduces the mask bitwise") {
    spec.mask_proportion = 0.5;
    spec.seed = 11;
    Tensor<uint8_t> a = make_mask(spec, grid);
    Tensor<uint8_t> b = make_mask(spec, grid);
    for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == b[i]);
  }
  SECTION("masked fraction lands in [p, p + max_patch_area/cells)") {
    double cells = static_cast<double>(grid.rows * grid.cols);
    double slack = 40.0 * 80.0 / cells;
    bool saw_diff = false;
    Tensor<uint8_t> prev;
    for (double p : {0.25, 0.5, 0.75}) {
      spec.mask_proportion = p;
      for (uint64_t seed = 0; seed < 60; ++seed) {
        spec.seed = seed;
        Tensor<uint8_t> mask = make_mask(spec, grid);
        double f = masked_fraction(mask);
        REQUIRE(f >= p);
        REQUIRE(f < p + slack);
        if (prev.numel() > 0) {
          for (int64_t i = 0; i < mask.numel(); ++i)
            if (mask[i] != prev[i]) {
              saw_diff = true;
              break;
            }
        }
        prev = mask;
      }
    }
    CHECK(saw_diff);
  }
}

TEST_CASE("apply_mask substitutes background and is idempotent", "[mae]") {
  GridSpec grid = grid_for_range(4.0, 2.0, 0.1);  // 20 x 40
  SemanticRaster raster = striped_raster(grid);
  SECTION("zero mask is the identity") {
    Tensor<uint8_t> none({grid.rows, grid.cols});
    SemanticRaster out = apply_mask(raster, none);
    for (int64_t i = 0; i < out.values.numel(); ++i) REQUIRE(out.values[i] == raster.values[i]);
  }
  SECTION("full mask is all background") {
    Tensor<uint8_t> all({grid.rows, grid.cols});
    all.fill(1);
    SemanticRaster out = apply_mask(raster, all);
    std::vector<uint8_t> labels = channels_to_labels(out.values);
    for (uint8_t v : labels) REQUIRE(v == kBackground);
  }
  SECTION("random mask matches direct substitution and is idempotent") {
    Rng rng(5);
    Tensor<uint8_t> mask({grid.rows, grid.cols});
    for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = rng.uniform() < 0.4;
    SemanticRaster once = apply_mask(raster, mask);
    for (int64_t i = 0; i < grid.rows * grid.cols; ++i)
      for (int k = 0; k < kNumChannels; ++k) {
        float want = mask[i] ? (k == kBackground ? 1.0f : 0.0f)
                             : raster.values[i * kNumChannels + k];
        REQUIRE(once.values[i * kNumChannels + k] == want);
      }
    SemanticRaster twice = apply_mask(once, mask);
    for (int64_t i = 0; i < once.values.numel(); ++i)
      REQUIRE(twice.values[i] == once.values[i]);
  }
  SECTION("shape mismatch throws") {
    Tensor<uint8_t> bad({grid.rows, grid.cols + 1});
    CHECK_THROWS_AS(apply_mask(raster, bad), ShapeError);
  }
}

TEST_CASE("patch round trips are exact", "[mae]") {
  Rng rng(8);
  Tensor<double> img = random_tensor<double>({12, 8, 5}, rng);
  Tensor<double> pt = pmap::detail::to_patches(img, 4);
  REQUIRE(pt.extent(0) == 6);
  REQUIRE(pt.extent(1) == 4 * 4 * 5);
  Tensor<double> back = pmap::detail::from_patches(pt, 3, 2, 4, 5);
  for (int64_t i = 0; i < img.numel(); ++i) REQUIRE(back[i] == img[i]);
}

TEST_CASE("mae forward meets its shape contract", "[mae]") {
  Rng rng(9);
  SECTION("64x32 grid with patch 8") {
    GridSpec grid = grid_for_range(3.2, 6.4, 0.1);
    REQUIRE(grid.rows == 64);
    REQUIRE(grid.cols == 32);
    MaeModel<float> m(tiny_mae(grid, 8, 16, 1, 2, 32, 8), rng);
    Tensor<float> x({64, 32, kNumChannels});
    for (int64_t i = 0; i < 64 * 32; ++i) x[i * kNumChannels + kBackground] = 1.0f;
    Tensor<float> y = m.forward(x, false);
    REQUIRE(y.extent(0) == 64);
    REQUIRE(y.extent(1) == 32);
    REQUIRE(y.extent(2) == kNumChannels);
    CHECK(all_finite(y));
  }
  SECTION("non-multiple grid pads with background and crops back") {
    GridSpec grid = grid_for_range(3.0, 5.0, 0.1);  // 50 x 30
    MaeModel<float> m(tiny_mae(grid, 8, 16, 1, 2, 32, 8), rng);
    CHECK(m.cfg.rows_pad() == 56);
    CHECK(m.cfg.cols_pad() == 32);
    Tensor<float> x = random_tensor<float>({50, 30, kNumChannels}, rng);
    Tensor<float> y = m.forward(x, false);
    REQUIRE(y.extent(0) == 50);
    REQUIRE(y.extent(1) == 30);
    CHECK(all_finite(y));
  }
  SECTION("eval forward is deterministic") {
    GridSpec grid = grid_for_range(1.6, 1.6, 0.1);
    MaeModel<double> m(tiny_mae(grid, 4, 16, 2, 2, 32, 8), rng);
    Tensor<double> x = random_tensor<double>({16, 16, kNumChannels}, rng);
    Tensor<double> a = m.forward(x, false);
    Tensor<double> b = m.forward(x, false);
    for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == b[i]);
  }
}

TEST_CASE("mae gradients match finite differences", "[mae]") {
  Rng rng(10);
  GridSpec grid = grid_for_range(0.8, 1.6, 0.1);  // 16 x 8
  MaeModel<double> m(tiny_mae(grid, 4, 16, 1, 2, 32, 8), rng);
  Tensor<double> x = random_tensor<double>({16, 8, kNumChannels}, rng, 0.8);
  std::vector<uint8_t> labels = random_labels(16 * 8, rng);
  std::vector<double> w(kNumChannels, 1.0);
  auto loss_only = [&] {
    Tensor<double> logits = m.forward(x, true);
    return cross_entropy(logits.reshaped({16 * 8, kNumChannels}), labels, w);
  };
  ParamRefs<double> ps;
  m.params(ps);
  zero_grads(ps);
  Tensor<double> logits = m.forward(x, true);
  Tensor<double> dl;
  cross_entropy(logits.reshaped({16 * 8, kNumChannels}), labels, w, &dl);
  Tensor<double> dx = m.backward(dl.reshaped({16, 8, kNumChannels}));

  SECTION("parameter gradients") {
    GradCheckReport rep = check_gradients(ps, loss_only, rng, 6);
    INFO(rep.worst_param << "[" << rep.worst_index << "] analytic " << rep.analytic
                         << " numeric " << rep.numeric);
    CHECK(rep.ok(1e-6));
  }
  SECTION("input gradients") {
    double h = 1e-6;
    for (int trial = 0; trial < 12; ++trial) {
      int64_t i = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(x.numel())));
      double keep = x[i];
      h = 1e-5 * std::max(1.0, std::abs(keep));
      x[i] = keep + h;
      double lp = loss_only();
      x[i] = keep - h;
      double lm = loss_only();
      x[i] = keep;
      double numeric = (lp - lm) / (2.0 * h);
      REQUIRE(grad_rel_err(dx[i], numeric) <= 1e-6);
    }
  }
}

TEST_CASE("refinement wraps a softmax around the autoencoder", "[mae]") {
  Rng rng(12);
  GridSpec grid = grid_for_range(1.6, 0.8, 0.1);  // 8 x 16
  MaeModel<double> m(tiny_mae(grid, 4, 16, 1, 2, 32, 8), rng);
  Tensor<double> logits = random_tensor<double>({8, 16, kNumChannels}, rng, 2.0);

  SECTION("equals forward of the per-cell softmax") {
    Tensor<double> probs =
        softmax_rows(logits.reshaped({8 * 16, kNumChannels})).reshaped({8, 16, kNumChannels});
    Tensor<double> a = refine(logits, m);
    Tensor<double> b = m.forward(probs, false);
    for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == b[i]);
    Tensor<double> again = refine(logits, m);
    for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == again[i]);
  }
  SECTION("shape mismatch throws") {
    Tensor<double> bad({16, 8, kNumChannels});
    CHECK_THROWS_AS(m.refine_forward(bad, false), ShapeError);
  }
  SECTION("refine_backward matches finite differences through the softmax") {
    std::vector<uint8_t> labels = random_labels(8 * 16, rng);
    std::vector<double> w(kNumChannels, 1.0);
    auto loss_only = [&] {
      Tensor<double> y = m.refine_forward(logits, true);
      return cross_entropy(y.reshaped({8 * 16, kNumChannels}), labels, w);
    };
    ParamRefs<double> ps;
    m.params(ps);
    zero_grads(ps);
    Tensor<double> y = m.refine_forward(logits, true);
    Tensor<double> dl;
    cross_entropy(y.reshaped({8 * 16, kNumChannels}), labels, w, &dl);
    Tensor<double> dlog = m.refine_backward(dl.reshaped({8, 16, kNumChannels}));
    double h = 1e-6;
    for (int trial = 0; trial < 12; ++trial) {
      int64_t i =
          static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(logits.numel())));
      double keep = logits[i];
      h = 1e-5 * std::max(1.0, std::abs(keep));
      logits[i] = keep + h;
      double lp = loss_only();
      logits[i] = keep - h;
      double lm = loss_only();
      logits[i] = keep;
      double numeric = (lp - lm) / (2.0 * h);
      REQUIRE(grad_rel_err(dlog[i], numeric) <= 1e-6);
    }
  }
}

TEST_CASE("pretraining overfits a single map and refinement preserves it", "[mae][slow]") {
  WorldSpec spec;
  spec.seed = 500;
  spec.extent_m = 60.0;
  spec.intersections = 1;
  World world = gen_world(spec);
  GridSpec grid = grid_for_range(12.0, 6.0, 0.3);  // 20 x 40
  std::vector<Scene> scenes = sample_dataset(world, 1, grid, 0.0, 0.0, 41);
  SemanticRaster gt = scenes[0].gt;
  {
    std::vector<uint8_t> labels = channels_to_labels(gt.values);
    int64_t fg = 0;
    for (uint8_t v : labels) fg += v != kBackground;
    REQUIRE(fg > 50);
  }

  MaskSpec mask_spec;  // grid checkerboard, 20x20 patches
  Rng rng(2);
  MaeModel<float> model(tiny_mae(grid, 4, 32, 2, 4, 64, 8), rng);

  std::ostringstream csv;
  std::vector<EpochLog> logs = pretrain_mae(model, {gt}, mask_spec, 300, 5e-3, 7, &csv);
  REQUIRE(logs.size() == 300);
  CHECK(logs.back().loss < logs.front().loss);

  Tensor<uint8_t> mask = make_mask(mask_spec, grid);
  REQUIRE(masked_fraction(mask) > 0.0);
  double acc = masked_accuracy(model, gt, mask);
  INFO("masked accuracy " << acc << " final miou " << logs.back().miou);
  CHECK(acc > 0.95);

  // Refinement of confident logits describing the masked map restores the
  // hidden half, so the trained completion survives the softmax wrapper.
  SemanticRaster masked = apply_mask(gt, mask);
  Tensor<float> strong({grid.rows, grid.cols, kNumChannels});
  for (int64_t i = 0; i < strong.numel(); ++i) strong[i] = 10.0f * masked.values[i];
  Tensor<float> refined = refine(strong, model);
  std::array<int64_t, kNumForegroundClasses> inter{}, uni{};
  pmap::detail::accumulate_argmax_iou(refined, channels_to_labels(gt.values), inter, uni);
  auto [iou, miou] = pmap::detail::pooled_iou(inter, uni);
  INFO("refined miou " << miou);
  CHECK(miou >= 0.95);

  CHECK(csv.str().rfind("epoch,loss,iou_divider,iou_ped_crossing,iou_boundary,miou\n", 0) == 0);
}

TEST_CASE("pretraining is reproducible and rejects bad input", "[mae]") {
  GridSpec grid = grid_for_range(4.0, 2.0, 0.1);  // 20 x 40
  SemanticRaster raster = striped_raster(grid);
  MaskSpec mask_spec;
  mask_spec.strategy = MaskStrategy::random;
  mask_spec.random_patch_candidates = {{5, 5}, {5, 10}};

  SECTION("same seed, same curve; different seed, different masks") {
    Rng ra(3);
    MaeModel<float> a(tiny_mae(grid, 4, 16, 1, 2, 32, 4), ra);
    std::vector<EpochLog> la = pretrain_mae(a, {raster}, mask_spec, 3, 1e-3, 19);
    Rng rb(3);
    MaeModel<float> b(tiny_mae(grid, 4, 16, 1, 2, 32, 4), rb);
    std::vector<EpochLog> lb = pretrain_mae(b, {raster}, mask_spec, 3, 1e-3, 19);
    REQUIRE(la.size() == lb.size());
    for (size_t i = 0; i < la.size(); ++i) REQUIRE(la[i].loss == lb[i].loss);
    Rng rc(3);
    MaeModel<float> c(tiny_mae(grid, 4, 16, 1, 2, 32, 4), rc);
    std::vector<EpochLog> lc = pretrain_mae(c, {raster}, mask_spec, 3, 1e-3, 20);
    CHECK(lc.front().loss != la.front().loss);
  }
  SECTION("empty dataset throws") {
    Rng r(4);
    MaeModel<float> m(tiny_mae(grid, 4, 16, 1, 2, 32, 4), r);
    std::vector<SemanticRaster> none;
    CHECK_THROWS_AS(pretrain_mae(m, none, mask_spec, 1, 1e-3, 0), InvalidArgument);
  }
  SECTION("grid mismatch throws") {
    Rng r(5);
    MaeModel<float> m(tiny_mae(grid, 4, 16, 1, 2, 32, 4), r);
    SemanticRaster other = striped_raster(grid_for_range(4.0, 4.0, 0.1));
    std::vector<SemanticRaster> maps = {other};
    CHECK_THROWS_AS(pretrain_mae(m, maps, mask_spec, 1, 1e-3, 0), ShapeError);
  }
  SECTION("non-finite loss raises NumericError") {
    Rng r(6);
    MaeModel<float> m(tiny_mae(grid, 4, 16, 1, 2, 32, 4), r);
    m.embed.w.value[0] = std::numeric_limits<float>::quiet_NaN();
    std::vector<SemanticRaster> maps = {raster};
    CHECK_THROWS_AS(pretrain_mae(m, maps, mask_spec, 1, 1e-3, 0), NumericError);
  }
}

namespace {

FusionConfig micro_fusion(const GridSpec& grid) {
  FusionConfig cfg;
  cfg.grid = grid;
  cfg.downsample = 2;
  cfg.attention = {2, 8, 4, 1, 0.0};
  cfg.mode = FusionMode::cross_attention;
  return cfg;
}

}  // namespace

TEST_CASE("joint fine-tuning gradients match finite differences", "[mae]") {
  Rng rng(13);
  GridSpec grid = grid_for_range(0.8, 0.8, 0.1);  // 8 x 8
  FusionModel<double> fusion(micro_fusion(grid), rng);
  MaeModel<double> mae(tiny_mae(grid, 4, 8, 1, 2, 16, 4), rng);
  Tensor<double> obs = random_tensor<double>({8, 8, kNumChannels}, rng);
  Tensor<double> sd = random_tensor<double>({4, 4, 1}, rng, 0.5);
  std::vector<uint8_t> labels = random_labels(64, rng);
  std::vector<double> w(kNumChannels, 1.0);

  auto loss_only = [&] {
    Tensor<double> x_init = fusion.forward(obs, sd, true);
    Tensor<double> refined = mae.refine_forward(x_init, true);
    return cross_entropy(refined.reshaped({64, kNumChannels}), labels, w);
  };
  ParamRefs<double> ps;
  mae.params(ps);
  fusion.params(ps);
  zero_grads(ps);
  Tensor<double> x_init = fusion.forward(obs, sd, true);
  Tensor<double> refined = mae.refine_forward(x_init, true);
  Tensor<double> dl;
  cross_entropy(refined.reshaped({64, kNumChannels}), labels, w, &dl);
  Tensor<double> dx_init = mae.refine_backward(dl.reshaped({8, 8, kNumChannels}));
  fusion.backward(dx_init);
  GradCheckReport rep = check_gradients(ps, loss_only, rng, 5);
  INFO(rep.worst_param << "[" << rep.worst_index << "] analytic " << rep.analytic
                       << " numeric " << rep.numeric);
  CHECK(rep.ok(1e-6));
}

TEST_CASE("fine-tuning trains jointly and honors the freeze flag", "[mae]") {
  WorldSpec spec;
  spec.seed = 501;
  spec.extent_m = 60.0;
  spec.intersections = 1;
  World world = gen_world(spec);
  GridSpec grid = grid_for_range(12.0, 6.0, 0.3);
  std::vector<Scene> scenes = sample_dataset(world, 2, grid, 0.3, 0.05, 42);

  FusionConfig fcfg;
  fcfg.grid = grid;
  fcfg.downsample = 4;
  fcfg.attention = {2, 8, 4, 1, 0.1};
  fcfg.mode = FusionMode::cross_attention;
  MaeConfig mcfg = tiny_mae(grid, 4, 16, 1, 2, 32, 4);

  SECTION("runs, logs, and reproduces") {
    Rng r1(21);
    FusionModel<float> f1(fcfg, r1);
    MaeModel<float> m1(mcfg, r1);
    std::ostringstream csv;
    std::vector<EpochLog> la = finetune(f1, m1, scenes, 2, 1e-3, 51, &csv);
    REQUIRE(la.size() == 2);
    for (const EpochLog& l : la) REQUIRE(std::isfinite(l.loss));
    CHECK(csv.str().rfind("epoch,loss,", 0) == 0);

    Rng r2(21);
    FusionModel<float> f2(fcfg, r2);
    MaeModel<float> m2(mcfg, r2);
    std::vector<EpochLog> lb = finetune(f2, m2, scenes, 2, 1e-3, 51);
    for (size_t i = 0; i < la.size(); ++i) {
      REQUIRE(la[i].loss == lb[i].loss);
      REQUIRE(la[i].miou == lb[i].miou);
    }
  }
  SECTION("freeze flag keeps the fusion stack untouched") {
    Rng r(22);
    FusionModel<float> f(fcfg, r);
    MaeModel<float> m(mcfg, r);
    ParamRefs<float> fps;
    f.params(fps);
    std::vector<std::vector<float>> before;
    for (auto* p : fps) before.push_back(p->value.vec());
    finetune(f, m, scenes, 1, 1e-3, 52, nullptr, true);
    for (size_t t = 0; t < fps.size(); ++t)
      REQUIRE(fps[t]->value.vec() == before[t]);

    finetune(f, m, scenes, 1, 1e-3, 52, nullptr, false);
    bool moved = false;
    for (size_t t = 0; t < fps.size() && !moved; ++t)
      moved = fps[t]->value.vec() != before[t];
    CHECK(moved);
  }
  SECTION("mismatched grids and empty data throw") {
    Rng r(23);
    FusionModel<float> f(fcfg, r);
    MaeModel<float> m(tiny_mae(grid_for_range(12.0, 12.0, 0.3), 4, 16, 1, 2, 32, 4), r);
    CHECK_THROWS_AS(finetune(f, m, scenes, 1, 1e-3, 0), InvalidArgument);
    MaeModel<float> ok(mcfg, r);
    std::vector<Scene> none;
    CHECK_THROWS_AS(finetune(f, ok, none, 1, 1e-3, 0), InvalidArgument);
  }
}
