#include "crashsev/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "crashsev/schema.hpp"
#include "crashsev/util.hpp"
#include "json.hpp"

namespace crashsev {

namespace fs = std::filesystem;

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string escape_xml(const std::string& s) {
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

struct Svg {
    std::ostringstream s;
    Svg(int w, int h) {
        s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
          << ' ' << h << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
        s << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
    }
    void text(double x, double y, const std::string& t, const char* anchor = "start", int size = 11) {
        s << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" text-anchor=\"" << anchor << "\" font-size=\"" << size
          << "\">" << escape_xml(t) << "</text>\n";
    }
    void line(double x1, double y1, double x2, double y2, const char* color = "black") {
        s << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(x2) << "\" y2=\"" << num(y2)
          << "\" stroke=\"" << color << "\"/>\n";
    }
    void rect(double x, double y, double w, double h, const char* fill) {
        s << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(w) << "\" height=\"" << num(h)
          << "\" fill=\"" << fill << "\"/>\n";
    }
    std::string finish() {
        s << "</svg>\n";
        return s.str();
    }
};

// Plot frame: axes with min/max tick labels; returns a mapper for y values.
struct Frame {
    double x0, y0, w, h, lo, hi;
    double y(double v) const { return y0 + h - (v - lo) / (hi - lo) * h; }
};

Frame axes(Svg& svg, double x0, double y0, double w, double h, double lo, double hi) {
    if (!(hi > lo)) hi = lo + 1.0;
    svg.line(x0, y0, x0, y0 + h);
    svg.line(x0, y0 + h, x0 + w, y0 + h);
    svg.text(x0 - 4, y0 + 4, num(hi), "end");
    svg.text(x0 - 4, y0 + h + 4, num(lo), "end");
    return {x0, y0, w, h, lo, hi};
}

std::string pct(double v) { return format_double(100.0 * v); }

}  // namespace

std::string metrics_csv(const std::vector<ModelResult>& results) {
    std::string s = "model,class,accuracy,precision,recall,f1,support,degenerate\n";
    for (const auto& r : results) {
        for (int c = 0; c < kNumClasses; ++c) {
            const auto& m = r.metrics.per_class[static_cast<std::size_t>(c)];
            std::string flags;
            if (m.precision_degenerate) flags += "precision;";
            if (m.recall_degenerate) flags += "recall;";
            if (m.f1_degenerate) flags += "f1;";
            if (!flags.empty()) flags.pop_back();
            s += quote_csv_field(r.model) + "," + std::string(severity_name(c)) + "," + pct(m.ovr_accuracy) + "," +
                 pct(m.precision) + "," + pct(m.recall) + "," + pct(m.f1) + "," + std::to_string(m.support) + "," +
                 flags + "\n";
        }
        const auto& a = r.metrics;
        s += quote_csv_field(r.model) + ",overall," + pct(a.accuracy) + ",,,,"  + std::to_string(a.total) + ",\n";
        s += quote_csv_field(r.model) + ",macro,," + pct(a.macro_precision) + "," + pct(a.macro_recall) + "," +
             pct(a.macro_f1) + "," + std::to_string(a.total) + ",\n";
    }
    return s;
}

std::string confusion_csv(const std::vector<ModelResult>& results) {
    std::string s = "model,true_class,pred_KA,pred_BC,pred_O\n";
    for (const auto& r : results)
        for (int t = 0; t < kNumClasses; ++t) {
            s += quote_csv_field(r.model) + "," + std::string(severity_name(t));
            for (int p = 0; p < kNumClasses; ++p)
                s += "," + std::to_string(r.cm.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)]);
            s += "\n";
        }
    return s;
}

std::string metrics_table(const std::vector<ModelResult>& results) {
    auto ip = [](double v) { return std::to_string(static_cast<long>(std::lround(100.0 * v))); };
    std::string s;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-16s %-6s %9s %10s %7s %4s\n", "Model", "Class", "Accuracy", "Precision", "Recall",
                  "F1");
    s += buf;
    for (const auto& r : results) {
        for (int c = 0; c < kNumClasses; ++c) {
            const auto& m = r.metrics.per_class[static_cast<std::size_t>(c)];
            std::snprintf(buf, sizeof buf, "%-16s %-6s %9s %10s %7s %4s\n", r.model.c_str(),
                          std::string(severity_name(c)).c_str(), ip(m.ovr_accuracy).c_str(), ip(m.precision).c_str(),
                          ip(m.recall).c_str(), ip(m.f1).c_str());
            s += buf;
        }
        std::snprintf(buf, sizeof buf, "%-16s overall accuracy %s, macro F1 %s\n", r.model.c_str(),
                      ip(r.metrics.accuracy).c_str(), ip(r.metrics.macro_f1).c_str());
        s += buf;
    }
    return s;
}

std::string svg_curves(const std::string& title, const std::string& y_label,
                       const std::vector<std::pair<std::string, std::vector<double>>>& series) {
    const int W = 560, H = 340;
    Svg svg(W, H);
    svg.text(W / 2.0, 20, title, "middle", 14);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::size_t len = 1;
    for (const auto& [name, v] : series) {
        for (double x : v)
            if (std::isfinite(x)) {
                lo = std::min(lo, x);
                hi = std::max(hi, x);
            }
        len = std::max(len, v.size());
    }
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    const Frame f = axes(svg, 60, 40, 440, 250, lo, hi);
    svg.text(f.x0 + f.w / 2, H - 15, "epoch", "middle");
    svg.text(15, f.y0 + f.h / 2, y_label, "middle");
    svg.text(f.x0, f.y0 + f.h + 15, "1", "middle");
    svg.text(f.x0 + f.w, f.y0 + f.h + 15, std::to_string(len), "middle");
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& v = series[k].second;
        const char* color = kPalette[k % 6];
        svg.s << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double x = f.x0 + (len > 1 ? f.w * static_cast<double>(i) / static_cast<double>(len - 1) : 0.0);
            svg.s << (i ? " " : "") << num(x) << ',' << num(f.y(v[i]));
        }
        svg.s << "\"/>\n";
        svg.rect(510, 50 + 16.0 * static_cast<double>(k), 10, 10, color);
        svg.text(524, 59 + 16.0 * static_cast<double>(k), series[k].first);
    }
    return svg.finish();
}

std::string svg_confusion_bars(const std::string& model, const ConfusionMatrix& cm) {
    const int W = 480, H = 320;
    Svg svg(W, H);
    svg.text(W / 2.0, 20, model + " confusion matrix", "middle", 14);
    std::size_t mx = 1;
    for (const auto& row : cm.counts)
        for (std::size_t v : row) mx = std::max(mx, v);
    const Frame f = axes(svg, 60, 40, 340, 230, 0, static_cast<double>(mx));
    const double group = f.w / kNumClasses, bar = group / (kNumClasses + 1);
    for (int t = 0; t < kNumClasses; ++t) {
        const double gx = f.x0 + group * t + bar / 2;
        for (int p = 0; p < kNumClasses; ++p) {
            const double v = static_cast<double>(cm.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)]);
            svg.rect(gx + bar * p, f.y(v), bar * 0.9, f.y0 + f.h - f.y(v), kPalette[p]);
        }
        svg.text(gx + bar * 1.5, f.y0 + f.h + 15, "true " + std::string(severity_name(t)), "middle");
    }
    for (int p = 0; p < kNumClasses; ++p) {
        svg.rect(410, 50 + 16.0 * p, 10, 10, kPalette[p]);
        svg.text(424, 59 + 16.0 * p, "pred " + std::string(severity_name(p)));
    }
    return svg.finish();
}

std::string svg_class_distribution(const ResampleReport& report) {
    const int W = 480, H = 320;
    Svg svg(W, H);
    svg.text(W / 2.0, 20, "Class counts before and after resampling", "middle", 14);
    std::size_t mx = 1;
    for (int c = 0; c < kNumClasses; ++c)
        mx = std::max({mx, report.original[static_cast<std::size_t>(c)], report.after_smote[static_cast<std::size_t>(c)],
                       report.after_enn[static_cast<std::size_t>(c)]});
    const Frame f = axes(svg, 60, 40, 340, 230, 0, static_cast<double>(mx));
    const char* stages[] = {"original", "after SMOTE", "after ENN"};
    const double group = f.w / kNumClasses, bar = group / 4;
    for (int c = 0; c < kNumClasses; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        const double vals[] = {static_cast<double>(report.original[cc]), static_cast<double>(report.after_smote[cc]),
                               static_cast<double>(report.after_enn[cc])};
        const double gx = f.x0 + group * c + bar / 2;
        for (int s = 0; s < 3; ++s) svg.rect(gx + bar * s, f.y(vals[s]), bar * 0.9, f.y0 + f.h - f.y(vals[s]), kPalette[s]);
        svg.text(gx + bar * 1.5, f.y0 + f.h + 15, std::string(severity_name(c)), "middle");
    }
    for (int s = 0; s < 3; ++s) {
        svg.rect(405, 50 + 16.0 * s, 10, 10, kPalette[s]);
        svg.text(419, 59 + 16.0 * s, stages[s]);
    }
    return svg.finish();
}

std::string svg_feature_histograms(const Dataset& before, const Dataset& after, std::size_t bins) {
    if (before.feature_names != after.feature_names) throw data_error("histograms need matching columns");
    const std::size_t nf = before.n_features(), cols = 4, rows = (nf + cols - 1) / cols;
    const double cw = 200, ch = 140;
    Svg svg(static_cast<int>(cw * cols), static_cast<int>(ch * static_cast<double>(rows) + 40));
    svg.text(cw * cols / 2, 20, "Feature distributions before (blue) and after (red) resampling", "middle", 14);
    for (std::size_t f = 0; f < nf; ++f) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const Dataset* ds : {&before, &after})
            for (std::size_t r = 0; r < ds->n_rows(); ++r) {
                lo = std::min(lo, ds->X(r, f));
                hi = std::max(hi, ds->X(r, f));
            }
        if (!(hi > lo)) hi = lo + 1.0;
        const double width = (hi - lo) / static_cast<double>(bins);
        std::vector<double> frac[2];
        double top = 0;
        int k = 0;
        for (const Dataset* ds : {&before, &after}) {
            frac[k].assign(bins, 0.0);
            for (std::size_t r = 0; r < ds->n_rows(); ++r) {
                const auto b = std::min(bins - 1, static_cast<std::size_t>((ds->X(r, f) - lo) / width));
                frac[k][b] += 1.0 / static_cast<double>(std::max<std::size_t>(1, ds->n_rows()));
            }
            top = std::max(top, *std::max_element(frac[k].begin(), frac[k].end()));
            ++k;
        }
        const double ox = cw * static_cast<double>(f % cols) + 30, oy = 40 + ch * static_cast<double>(f / cols) + 15;
        std::string name = before.feature_names[f];
        if (name.size() > 28) name = name.substr(0, 28);
        svg.text(ox, oy - 4, name, "start", 10);
        const Frame fr = axes(svg, ox, oy, cw - 45, ch - 40, 0, top);
        const double bw = fr.w / static_cast<double>(bins);
        for (std::size_t b = 0; b < bins; ++b)
            for (int s = 0; s < 2; ++s) {
                const double v = frac[s][b];
                svg.rect(fr.x0 + bw * static_cast<double>(b) + bw * 0.5 * s, fr.y(v), bw * 0.45, fr.y0 + fr.h - fr.y(v),
                         kPalette[s]);
            }
    }
    return svg.finish();
}

std::vector<std::string> emit_reports(const std::vector<ModelResult>& results,
                                      const std::optional<ResampleReport>& resample,
                                      const DistributionInputs& dist, const fs::path& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir / "plots", ec);
    if (ec) throw io_error("cannot create report directory " + out_dir.string() + ": " + ec.message());
    std::vector<std::string> notes;
    if (!results.empty()) {
        write_text_file(out_dir / "metrics.csv", metrics_csv(results));
        write_text_file(out_dir / "confusion.csv", confusion_csv(results));
        write_text_file(out_dir / "report.txt", metrics_table(results));
    }
    std::string curves = "model,epoch,train_loss,val_loss,train_acc,val_acc,lr\n";
    bool any_curves = false;
    for (const auto& r : results) {
        if (r.curves.rows.empty()) {
            notes.push_back("curves omitted for " + r.model + ": one-shot inference, no training epochs");
        } else {
            any_curves = true;
            for (const auto& row : r.curves.rows)
                curves += quote_csv_field(r.model) + "," + std::to_string(row.epoch) + "," + format_double(row.train_loss) +
                          "," + format_double(row.val_loss) + "," + format_double(row.train_acc) + "," +
                          format_double(row.val_acc) + "," + format_double(row.lr) + "\n";
            std::vector<double> tl, vl, ta, va;
            for (const auto& row : r.curves.rows) {
                tl.push_back(row.train_loss);
                vl.push_back(row.val_loss);
                ta.push_back(row.train_acc);
                va.push_back(row.val_acc);
            }
            write_text_file(out_dir / "plots" / ("loss_" + r.model + ".svg"),
                            svg_curves(r.model + " loss", "loss", {{"train", tl}, {"validation", vl}}));
            write_text_file(out_dir / "plots" / ("accuracy_" + r.model + ".svg"),
                            svg_curves(r.model + " accuracy", "accuracy", {{"train", ta}, {"validation", va}}));
        }
        write_text_file(out_dir / "plots" / ("confusion_" + r.model + ".svg"), svg_confusion_bars(r.model, r.cm));
    }
    if (any_curves) write_text_file(out_dir / "curves.csv", curves);
    if (resample) {
        resample->write_csv(out_dir / "resample_report.csv");
        write_text_file(out_dir / "plots" / "class_distribution.svg", svg_class_distribution(*resample));
    }
    if (dist.before && dist.after)
        write_text_file(out_dir / "plots" / "feature_distributions.svg", svg_feature_histograms(*dist.before, *dist.after));
    return notes;
}

void write_manifest(const fs::path& out_dir, const std::vector<std::string>& notes) {
    using nlohmann::json;
    std::vector<std::string> files;
    std::error_code ec;
    for (fs::recursive_directory_iterator it(out_dir, ec), end; !ec && it != end; it.increment(ec)) {
        if (!it->is_regular_file()) continue;
        const std::string rel = fs::relative(it->path(), out_dir).generic_string();
        if (rel == "manifest.json") continue;
        files.push_back(rel);
    }
    if (ec) throw io_error("cannot list " + out_dir.string() + ": " + ec.message());
    std::sort(files.begin(), files.end());
    json artifacts = json::array();
    for (const auto& f : files) artifacts.push_back({{"path", f}, {"sha256", sha256_file(out_dir / f)}});
    const json j = {{"version", 1}, {"artifacts", artifacts}, {"notes", notes}};
    write_text_file(out_dir / "manifest.json", j.dump(2) + "\n");
}

}  // namespace crashsev
