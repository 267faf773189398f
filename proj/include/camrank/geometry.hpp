#pragma once

namespace camrank {

// Axis-aligned box in continuous input-pixel coordinates (x2, y2 exclusive edges).
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() > 0.0 && height() > 0.0 ? width() * height() : 0.0; }

  friend bool operator==(const Box&, const Box&) = default;
};

}  // namespace camrank
