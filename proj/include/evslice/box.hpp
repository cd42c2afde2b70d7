#pragma once

namespace evslice {

// Axis-aligned box, center (x, y) with extents (w, h) in pixels.
struct Box {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double left() const { return x - w / 2.0; }
    double right() const { return x + w / 2.0; }
    double top() const { return y - h / 2.0; }
    double bottom() const { return y + h / 2.0; }
    double area() const { return w * h; }
};

}  // namespace evslice
