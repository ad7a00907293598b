#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "pmap/raster.hpp"
#include "pmap/tensor.hpp"

namespace pmap {

// Row-major RGB byte image; pixel (r, c) maps 1:1 onto grid cell (r, c).
struct Image {
  int64_t width = 0, height = 0;
  std::vector<uint8_t> rgb;  // height * width * 3

  Image() = default;
  Image(int64_t w, int64_t h)
      : width(w), height(h), rgb(static_cast<size_t>(w * h * 3), 0) {}

  uint8_t* at(int64_t r, int64_t c) { return rgb.data() + (r * width + c) * 3; }
  const uint8_t* at(int64_t r, int64_t c) const { return rgb.data() + (r * width + c) * 3; }
};

// Fixed palette: background black, divider green, ped crossing red,
// boundary blue. The SD overlay is pure white so it never collides.
inline std::array<uint8_t, 3> class_color(int class_id) {
  switch (class_id) {
    case kDivider: return {0, 255, 0};
    case kPedCrossing: return {255, 0, 0};
    case kBoundary: return {0, 0, 255};
    case kBackground: return {0, 0, 0};
    default: throw InvalidArgument("class_color: unknown class " + std::to_string(class_id));
  }
}

inline Image render_labels(const std::vector<uint8_t>& labels, int64_t rows, int64_t cols) {
  if (static_cast<int64_t>(labels.size()) != rows * cols)
    throw ShapeError("render_labels: label count does not match rows * cols");
  Image img(cols, rows);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) {
      std::array<uint8_t, 3> color = class_color(labels[static_cast<size_t>(r * cols + c)]);
      uint8_t* px = img.at(r, c);
      px[0] = color[0];
      px[1] = color[1];
      px[2] = color[2];
    }
  return img;
}

// Argmax rendering covers one-hot labels, probabilities, and raw logits.
template <typename T>
inline Image render_channels(const Tensor<T>& values) {
  if (values.rank() != 3 || values.extent(2) != kNumChannels)
    throw ShapeError("render_channels: expected rows x cols x " +
                     std::to_string(kNumChannels));
  return render_labels(channels_to_labels(values), values.extent(0), values.extent(1));
}

inline Image render_semantic(const SemanticRaster& raster) {
  return render_channels(raster.values);
}

// Paints SD occupancy (rows x cols x 1, cells > 0.5) white on top.
template <typename T>
inline void overlay_sd(Image& img, const Tensor<T>& occupancy) {
  if (occupancy.rank() != 3 || occupancy.extent(0) != img.height ||
      occupancy.extent(1) != img.width || occupancy.extent(2) != 1)
    throw ShapeError("overlay_sd: occupancy shape " + shape_str(occupancy.shape()) +
                     " does not match image");
  for (int64_t r = 0; r < img.height; ++r)
    for (int64_t c = 0; c < img.width; ++c)
      if (occupancy[r * img.width + c] > T(0.5)) {
        uint8_t* px = img.at(r, c);
        px[0] = px[1] = px[2] = 255;
      }
}

// Binary PPM; fixed header formatting keeps output bit-exact everywhere.
inline void write_ppm(std::ostream& os, const Image& img) {
  if (img.width < 1 || img.height < 1) throw InvalidArgument("write_ppm: empty image");
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()),
           static_cast<std::streamsize>(img.rgb.size()));
  if (!os) throw DataError("write_ppm: stream write failed");
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("write_ppm: cannot open " + path);
  write_ppm(os, img);
}

}  // namespace pmap
