#pragma once

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "covidx/metrics.hpp"
#include "covidx/trainer.hpp"

// Plain-text SVG writers. Coordinates are printed with fixed precision so
// regenerating a plot from the same record gives identical bytes.

namespace covidx::svg {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

class Canvas {
 public:
  Canvas(double width, double height) : w_(width), h_(height) {}

  void text(double x, double y, const std::string& s, const char* anchor = "middle", int size = 12) {
    body_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-size=\"" << size
          << "\" text-anchor=\"" << anchor << "\">" << escape(s) << "</text>\n";
  }
  void line(double x1, double y1, double x2, double y2, const char* stroke, const char* extra = "") {
    body_ << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(x2) << "\" y2=\""
          << num(y2) << "\" stroke=\"" << stroke << "\"" << extra << "/>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill) {
    body_ << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(w) << "\" height=\""
          << num(h) << "\" fill=\"" << fill << "\" stroke=\"#333333\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const char* stroke,
                const std::string& series) {
    body_ << "<polyline data-series=\"" << escape(series) << "\" fill=\"none\" stroke=\"" << stroke
          << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      body_ << (i ? " " : "") << num(pts[i].first) << "," << num(pts[i].second);
    }
    body_ << "\"/>\n";
  }

  std::string str() const {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w_) << "\" height=\"" << num(h_)
       << "\" viewBox=\"0 0 " << num(w_) << " " << num(h_) << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << body_.str() << "</svg>\n";
    return os.str();
  }

 private:
  double w_, h_;
  std::ostringstream body_;
};

struct Frame {
  double x0, y0, w, h;  // pixel box
  double lo, hi;        // value range on the y axis
  std::size_t n;        // points along x

  double px(std::size_t i) const { return x0 + (n > 1 ? w * static_cast<double>(i) / static_cast<double>(n - 1) : w / 2); }
  double py(double v) const { return y0 + h - h * (v - lo) / (hi - lo); }
};

inline void axes(Canvas& c, const Frame& f, const std::string& title, const std::string& xlabel) {
  c.line(f.x0, f.y0 + f.h, f.x0 + f.w, f.y0 + f.h, "#000000");
  c.line(f.x0, f.y0, f.x0, f.y0 + f.h, "#000000");
  for (int k = 0; k <= 4; ++k) {
    const double v = f.lo + (f.hi - f.lo) * k / 4.0;
    c.line(f.x0 - 4, f.py(v), f.x0, f.py(v), "#000000");
    c.text(f.x0 - 6, f.py(v) + 4, num(v), "end", 10);
  }
  c.text(f.x0 + f.w / 2, f.y0 - 10, title, "middle", 14);
  c.text(f.x0 + f.w / 2, f.y0 + f.h + 30, xlabel, "middle", 11);
}

/// Loss and accuracy panels, one point per epoch for train and validation.
inline std::string training_curves(const std::string& model, const std::vector<EpochLog>& logs) {
  Canvas c(820, 360);
  double max_loss = 0;
  for (const auto& l : logs) max_loss = std::max({max_loss, l.train_loss, l.val_loss});
  if (max_loss <= 0) max_loss = 1;
  const Frame loss{60, 50, 320, 240, 0, max_loss, logs.size()};
  const Frame acc{470, 50, 320, 240, 0, 1, logs.size()};
  axes(c, loss, model + " loss", "epoch (1-" + std::to_string(logs.size()) + ")");
  axes(c, acc, model + " accuracy", "epoch (1-" + std::to_string(logs.size()) + ")");
  auto series = [&](const Frame& f, auto get, const char* color, const std::string& name) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < logs.size(); ++i) pts.emplace_back(f.px(i), f.py(get(logs[i])));
    c.polyline(pts, color, name);
  };
  series(loss, [](const EpochLog& l) { return l.train_loss; }, "#1f77b4", "train_loss");
  series(loss, [](const EpochLog& l) { return l.val_loss; }, "#d62728", "val_loss");
  series(acc, [](const EpochLog& l) { return l.train_accuracy; }, "#1f77b4", "train_acc");
  series(acc, [](const EpochLog& l) { return l.val_accuracy; }, "#d62728", "val_acc");
  c.line(600, 330, 620, 330, "#1f77b4");
  c.text(625, 334, "train", "start", 11);
  c.line(680, 330, 700, 330, "#d62728");
  c.text(705, 334, "validation", "start", 11);
  return c.str();
}

/// 2x2 grid, rows = true class, columns = predicted class, positive first.
inline std::string confusion_plot(const std::string& model, const ConfusionMatrix& cm) {
  Canvas c(360, 340);
  c.text(190, 30, model + " confusion matrix", "middle", 14);
  const std::size_t cells[2][2] = {{cm.tp, cm.fn}, {cm.fp, cm.tn}};
  const char* names[2] = {"covid19", "normal"};
  const double total = std::max<double>(1.0, static_cast<double>(cm.total()));
  for (int r = 0; r < 2; ++r) {
    for (int k = 0; k < 2; ++k) {
      const int shade = 255 - static_cast<int>(180.0 * static_cast<double>(cells[r][k]) / total);
      char fill[16];
      std::snprintf(fill, sizeof fill, "#%02x%02xff", shade, shade);
      c.rect(100 + 110 * k, 70 + 110 * r, 110, 110, fill);
      c.text(155 + 110 * k, 130 + 110 * r, std::to_string(cells[r][k]), "middle", 20);
    }
    c.text(95, 130 + 110 * r, names[r], "end", 11);
    c.text(155 + 110 * r, 65, names[r], "middle", 11);
  }
  c.text(210, 310, "predicted", "middle", 11);
  c.text(20, 185, "true", "start", 11);
  return c.str();
}

inline std::string roc_plot(const std::string& model, const RocCurve& roc) {
  Canvas c(380, 380);
  const Frame f{60, 50, 280, 280, 0, 1, 2};
  axes(c, f, model + " ROC", "false positive rate");
  c.line(f.x0, f.py(0), f.x0 + f.w, f.py(1), "#999999", " stroke-dasharray=\"4,4\"");
  std::vector<std::pair<double, double>> pts;
  for (const auto& p : roc.points) pts.emplace_back(f.x0 + f.w * p.fpr, f.py(p.tpr));
  c.polyline(pts, "#d62728", "roc");
  c.text(f.x0 + f.w - 10, f.py(0) - 12, "AUC = " + display2(roc.auc), "end", 13);
  return c.str();
}

}  // namespace covidx::svg
