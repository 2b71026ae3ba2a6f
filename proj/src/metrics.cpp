#include "hnf/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "hnf/errors.hpp"

namespace fs = std::filesystem;

namespace hnf {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_short(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "fold,epoch,split,metric,value\n";
    for (const MetricRow& r : rows)
        out << r.fold << ',' << r.epoch << ',' << r.split << ',' << r.metric << ','
            << fmt_double(r.value) << '\n';
    if (!out) throw std::runtime_error("cannot write metrics csv " + path);
}

std::vector<MetricRow> read_metrics_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read metrics csv " + path);
    std::string line;
    std::vector<MetricRow> rows;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        const auto f = split_csv_line(line);
        if (f.size() != 5)
            throw std::runtime_error("malformed metrics row in " + path + ": " + line);
        rows.push_back(MetricRow{std::stoll(f[0]), std::stoll(f[1]), f[2], f[3],
                                 std::stod(f[4])});
    }
    return rows;
}

PrfMetrics prf_from_confusion(const std::vector<std::vector<int64_t>>& confusion) {
    const std::size_t c = confusion.size();
    if (c == 0) throw ShapeMismatch("confusion matrix is empty");
    for (const auto& row : confusion)
        if (row.size() != c)
            throw ShapeMismatch("confusion matrix is not square: " + std::to_string(c) +
                                " classes but a row of length " + std::to_string(row.size()));

    PrfMetrics m;
    m.precision.resize(c);
    m.recall.resize(c);
    m.f1.resize(c);
    m.zero_division.assign(c, false);
    for (std::size_t k = 0; k < c; ++k) {
        const double tp = static_cast<double>(confusion[k][k]);
        double col = 0.0, row = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            col += static_cast<double>(confusion[i][k]);
            row += static_cast<double>(confusion[k][i]);
        }
        if (col > 0.0) {
            m.precision[k] = tp / col;
        } else {
            m.precision[k] = 0.0;
            m.zero_division[k] = true;
        }
        if (row > 0.0) {
            m.recall[k] = tp / row;
        } else {
            m.recall[k] = 0.0;
            m.zero_division[k] = true;
        }
        const double pr = m.precision[k] + m.recall[k];
        if (pr > 0.0) {
            m.f1[k] = 2.0 * m.precision[k] * m.recall[k] / pr;
        } else {
            m.f1[k] = 0.0;
            m.zero_division[k] = true;
        }
    }
    m.macro_precision = std::accumulate(m.precision.begin(), m.precision.end(), 0.0) /
                        static_cast<double>(c);
    m.macro_recall =
        std::accumulate(m.recall.begin(), m.recall.end(), 0.0) / static_cast<double>(c);
    m.macro_f1 = std::accumulate(m.f1.begin(), m.f1.end(), 0.0) / static_cast<double>(c);
    return m;
}

double topn_accuracy(const std::vector<Tensor>& probs, const std::vector<int64_t>& labels,
                     int64_t n) {
    if (probs.size() != labels.size())
        throw ShapeMismatch("topn_accuracy got " + std::to_string(probs.size()) +
                            " probability rows for " + std::to_string(labels.size()) +
                            " labels");
    if (probs.empty()) throw EmptySplit("topn_accuracy requires at least one item");
    if (n < 1) throw std::invalid_argument("topn_accuracy needs n >= 1");

    int64_t hits = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const Tensor& p = probs[i];
        const int64_t c = p.numel();
        std::vector<int64_t> order(static_cast<std::size_t>(c));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            return p.at(a) > p.at(b);
        });
        const int64_t take = std::min(n, c);
        for (int64_t r = 0; r < take; ++r)
            if (order[static_cast<std::size_t>(r)] == labels[i]) {
                ++hits;
                break;
            }
    }
    return static_cast<double>(hits) / static_cast<double>(probs.size());
}

std::string render_loss_svg(const std::vector<MetricRow>& rows) {
    std::map<int64_t, std::vector<std::pair<int64_t, double>>> curves;
    for (const MetricRow& r : rows)
        if (r.split == "val" && r.metric == "loss") curves[r.fold].emplace_back(r.epoch, r.value);

    const double width = 640.0, height = 400.0;
    const double ml = 56.0, mr = 16.0, mt = 16.0, mb = 40.0;
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << width << " "
        << height << "\">\n";
    svg << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";

    double lo = 0.0, hi = 1.0;
    int64_t emax = 1;
    bool any = false;
    for (auto& [fold, pts] : curves) {
        std::sort(pts.begin(), pts.end());
        for (const auto& [e, v] : pts) {
            if (!any) {
                lo = hi = v;
                any = true;
            }
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            emax = std::max(emax, e);
        }
    }
    if (hi <= lo) hi = lo + 1.0;

    auto px = [&](double e) { return ml + (width - ml - mr) * e / static_cast<double>(emax); };
    auto py = [&](double v) { return mt + (height - mt - mb) * (hi - v) / (hi - lo); };

    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
        << height - mb << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr
        << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"8\" y=\"" << mt + 12 << "\" font-size=\"12\">" << fmt_short(hi)
        << "</text>\n";
    svg << "<text x=\"8\" y=\"" << height - mb << "\" font-size=\"12\">" << fmt_short(lo)
        << "</text>\n";
    svg << "<text x=\"" << width / 2 << "\" y=\"" << height - 10
        << "\" font-size=\"12\">epoch (validation loss)</text>\n";

    static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                     "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    std::size_t ci = 0;
    for (const auto& [fold, pts] : curves) {
        svg << "<polyline fill=\"none\" stroke=\"" << kPalette[ci % 10]
            << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [e, v] : pts)
            svg << fmt_short(px(static_cast<double>(e))) << "," << fmt_short(py(v)) << " ";
        svg << "\"/>\n";
        svg << "<text x=\"" << width - mr - 60 << "\" y=\"" << mt + 14 * (ci + 1)
            << "\" font-size=\"11\" fill=\"" << kPalette[ci % 10] << "\">fold "
            << fold << "</text>\n";
        ++ci;
    }
    svg << "</svg>\n";
    return svg.str();
}

std::vector<std::string> write_report(const std::string& run_dir, const std::string& out_dir) {
    if (!fs::is_directory(run_dir))
        throw std::runtime_error("run directory " + run_dir + " does not exist");
    std::vector<fs::path> csvs;
    for (const auto& entry : fs::directory_iterator(run_dir)) {
        const std::string name = entry.path().filename().string();
        if (entry.is_regular_file() && name.rfind("metrics", 0) == 0 &&
            entry.path().extension() == ".csv")
            csvs.push_back(entry.path());
    }
    std::sort(csvs.begin(), csvs.end());
    if (csvs.empty()) throw std::runtime_error("no metrics csv files under " + run_dir);

    std::vector<MetricRow> rows;
    for (const fs::path& p : csvs) {
        auto part = read_metrics_csv(p.string());
        rows.insert(rows.end(), part.begin(), part.end());
    }

    fs::create_directories(out_dir);
    std::vector<std::string> written;

    // Final validation metrics per fold.
    std::map<int64_t, int64_t> last_epoch;
    for (const MetricRow& r : rows)
        if (r.split == "val") last_epoch[r.fold] = std::max(last_epoch[r.fold], r.epoch);
    std::vector<MetricRow> summary;
    for (const MetricRow& r : rows)
        if (r.split == "val" && r.epoch == last_epoch[r.fold]) summary.push_back(r);
    const std::string summary_path = (fs::path(out_dir) / "summary.csv").string();
    write_metrics_csv(summary_path, summary);
    written.push_back(summary_path);

    const std::string svg_path = (fs::path(out_dir) / "loss.svg").string();
    std::ofstream svg(svg_path, std::ios::binary | std::ios::trunc);
    svg << render_loss_svg(rows);
    if (!svg) throw std::runtime_error("cannot write " + svg_path);
    written.push_back(svg_path);
    return written;
}

}  // namespace hnf
