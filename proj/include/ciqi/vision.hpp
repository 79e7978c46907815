#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "ciqi/error.hpp"
#include "ciqi/image.hpp"

namespace ciqi {

inline constexpr std::int64_t kDefaultPixelBudget = 313'600;

struct ImageDims {
  std::int64_t width = 1;
  std::int64_t height = 1;

  std::int64_t area() const { return width * height; }
  bool operator==(const ImageDims&) const = default;
};

inline ImageDims dims_of(const Image& image) { return {image.width, image.height}; }

// Pixel-edge coordinates: the box covers columns [x1, x2) and rows [y1, y2).
struct BBox {
  std::int64_t x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  std::int64_t width() const { return x2 - x1; }
  std::int64_t height() const { return y2 - y1; }
  bool degenerate() const { return x1 >= x2 || y1 >= y2; }
  bool operator==(const BBox&) const = default;
};

namespace detail {

inline std::int64_t isqrt(unsigned __int128 n) {
  auto r = static_cast<unsigned __int128>(std::sqrt(static_cast<long double>(n)));
  while (r * r > n) --r;
  while ((r + 1) * (r + 1) <= n) ++r;
  return static_cast<std::int64_t>(r);
}

}  // namespace detail

// Largest dims with the same aspect ratio that fit in `max_pixels`. Each axis
// is floor(side * sqrt(max_pixels / area)), at least 1, evaluated exactly as
// floor(sqrt(max_pixels * side / other_side)). When the 1-pixel floor on a
// very thin image would push the product over budget, the long side is cut
// back to max_pixels / short_side. Never upscales.
inline ImageDims downscale_to_budget(ImageDims dims, std::int64_t max_pixels) {
  if (max_pixels < 1) throw Error(ErrorCode::InvalidArgument, "pixel budget must be >= 1");
  if (dims.width < 1 || dims.height < 1) throw Error(ErrorCode::InvalidArgument, "image dims must be >= 1");
  if (dims.area() <= max_pixels) return dims;

  using u128 = unsigned __int128;
  const auto budget = static_cast<u128>(max_pixels);
  ImageDims out{
      std::max<std::int64_t>(1, detail::isqrt(budget * static_cast<u128>(dims.width) / static_cast<u128>(dims.height))),
      std::max<std::int64_t>(1, detail::isqrt(budget * static_cast<u128>(dims.height) / static_cast<u128>(dims.width)))};
  if (out.area() > max_pixels) {
    if (out.width >= out.height)
      out.width = max_pixels / out.height;
    else
      out.height = max_pixels / out.width;
  }
  return out;
}

namespace detail {

inline std::int64_t clamp64(std::int64_t v, std::int64_t lo, std::int64_t hi) { return std::min(std::max(v, lo), hi); }

// round(value * num / den) for value >= 0, half rounds up; exact integer arithmetic.
inline std::int64_t scale_round(std::int64_t value, std::int64_t num, std::int64_t den) {
  return (2 * value * num + den) / (2 * den);
}

inline BBox clamp_box(const BBox& b, ImageDims dims) {
  return {clamp64(b.x1, 0, dims.width), clamp64(b.y1, 0, dims.height), clamp64(b.x2, 0, dims.width),
          clamp64(b.y2, 0, dims.height)};
}

}  // namespace detail

// Maps a box given in the agent's (downscaled) pixel space back onto the
// original image: clamp to the downscaled frame, scale each axis with
// round-half-up, clamp to the original frame.
inline BBox map_bbox_to_original(const BBox& bbox, ImageDims downscaled, ImageDims original) {
  if (downscaled.width < 1 || downscaled.height < 1 || original.width < downscaled.width ||
      original.height < downscaled.height)
    throw Error(ErrorCode::InvalidArgument, "downscaled dims must be positive and no larger than the original");
  if (bbox.degenerate()) throw Error(ErrorCode::DegenerateBBox, "zero-width or zero-height bbox");

  const BBox clamped = detail::clamp_box(bbox, downscaled);
  if (clamped.degenerate()) throw Error(ErrorCode::DegenerateBBox, "bbox outside image bounds");

  const BBox mapped = detail::clamp_box(
      {detail::scale_round(clamped.x1, original.width, downscaled.width),
       detail::scale_round(clamped.y1, original.height, downscaled.height),
       detail::scale_round(clamped.x2, original.width, downscaled.width),
       detail::scale_round(clamped.y2, original.height, downscaled.height)},
      original);
  if (mapped.degenerate()) throw Error(ErrorCode::DegenerateBBox, "bbox collapses after mapping");
  return mapped;
}

inline Image crop(const Image& image, const BBox& box) {
  if (box.degenerate() || box.x1 < 0 || box.y1 < 0 || box.x2 > image.width || box.y2 > image.height)
    throw Error(ErrorCode::DegenerateBBox, "crop box outside image");
  Image out(static_cast<int>(box.width()), static_cast<int>(box.height()));
  for (std::int64_t y = 0; y < box.height(); ++y) {
    const auto* src = image.row(static_cast<int>(box.y1 + y)) + box.x1 * Image::kChannels;
    std::copy(src, src + out.stride(), out.row(static_cast<int>(y)));
  }
  return out;
}

// Bilinear resampling with pixel-center alignment and edge clamping.
inline Image resize_bilinear(const Image& src, ImageDims target) {
  if (src.empty()) throw Error(ErrorCode::InvalidArgument, "cannot resize an empty image");
  if (target.width == src.width && target.height == src.height) return src;
  Image out(static_cast<int>(target.width), static_cast<int>(target.height));
  const double sx = static_cast<double>(src.width) / static_cast<double>(target.width);
  const double sy = static_cast<double>(src.height) / static_cast<double>(target.height);
  for (int y = 0; y < out.height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out.width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < Image::kChannels; ++c) {
        const double top = src.row(y0)[x0 * 3 + c] * (1 - wx) + src.row(y0)[x1 * 3 + c] * wx;
        const double bottom = src.row(y1)[x0 * 3 + c] * (1 - wx) + src.row(y1)[x1 * 3 + c] * wx;
        out.row(y)[x * 3 + c] = static_cast<std::uint8_t>(std::lround(top * (1 - wy) + bottom * wy));
      }
    }
  }
  return out;
}

// The image exactly as the agent sees it.
inline Image fit_to_budget(const Image& image, std::int64_t max_pixels = kDefaultPixelBudget) {
  return resize_bilinear(image, downscale_to_budget(dims_of(image), max_pixels));
}

struct ZoomPatch {
  Image patch;          // original-resolution pixels, no resampling
  BBox original_bbox;   // the mapped crop box
  std::string label;
};

inline ZoomPatch zoom_crop(const Image& original, const BBox& bbox_downscaled, ImageDims downscaled,
                           std::string label) {
  if (original.empty()) throw Error(ErrorCode::DecodeError, "empty source image");
  const BBox mapped = map_bbox_to_original(bbox_downscaled, downscaled, dims_of(original));
  return {crop(original, mapped), mapped, std::move(label)};
}

}  // namespace ciqi
