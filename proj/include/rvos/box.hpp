#pragma once

namespace rvos {

/// Axis-aligned box as half-open intervals [x0, x1) x [y0, y1).
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool empty() const { return x1 <= x0 || y1 <= y0; }
  bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  bool operator==(const Box&) const = default;
};

/// Maps a pixel box onto a grid downsampled by `stride`, rounding outward.
inline Box rescale_box_outward(const Box& b, int stride) {
  auto floor_div = [](int a, int s) { return a >= 0 ? a / s : -((-a + s - 1) / s); };
  auto ceil_div = [](int a, int s) { return a >= 0 ? (a + s - 1) / s : -((-a) / s); };
  return Box{floor_div(b.x0, stride), floor_div(b.y0, stride), ceil_div(b.x1, stride), ceil_div(b.y1, stride)};
}

}  // namespace rvos
