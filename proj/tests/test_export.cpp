#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "clan_forge/export.hpp"

using namespace clan_forge;

namespace {

RunRecord sample_run() {
  RunRecord r;
  r.method = "clan";
  r.seed = 3;
  r.num_classes = 3;
  r.config = {{"k", 1}};
  r.evals.push_back({0, 0.1, {0.2, std::nullopt, 0.1}, {1.0, std::nullopt, 1.0}, {2.0, std::nullopt, 3.0}});
  for (std::size_t i = 0; i < 4; ++i) {
    IterationRecord it;
    it.iter = i;
    it.losses = {1.0 / (i + 3.0), 0.1 * i, 0.7, 1.3, 2.0};
    it.has_d_stats = true;
    it.d_src_dev = 0.01 * i;
    it.d_tgt_dev = 0.02;
    r.iterations.push_back(it);
  }
  r.evals.push_back({4, 0.3333333333333333, {0.5, 0.25, 0.125}, {0.9, 1.1, 0.7}, {1.8, 2.2, 2.1}});
  r.wall_seconds = 1.5;
  return r;
}

}  // namespace

TEST(Export, FormatDoubleRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0}) EXPECT_EQ(parse_double(format_double(v)), v);
  EXPECT_TRUE(std::isnan(parse_double(format_double(std::nan("")))));
  EXPECT_THROW(parse_double("1.0x"), std::invalid_argument);
}

TEST(Export, EmptyRunGivesHeaderOnlyCsv) {
  RunRecord r;
  r.num_classes = 2;
  const std::string csv = metrics_csv(r);
  EXPECT_EQ(csv,
            "iter,method,seed,loss_seg,loss_weight,loss_advG,loss_advD,miou,iou_class_0,iou_class_1,"
            "ccd_class_0,ccd_class_1,dstat_src,dstat_tgt\n");
}

TEST(Export, CsvReimportReproducesSeries) {
  const RunRecord r = sample_run();
  const CsvTable t = parse_csv(metrics_csv(r));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_FALSE(t.number(0, "loss_seg").has_value());
  EXPECT_FALSE(t.number(0, "iou_class_1").has_value());
  EXPECT_EQ(*t.number(1, "miou"), r.evals[1].miou);
  EXPECT_EQ(*t.number(1, "iou_class_2"), 0.125);
  EXPECT_EQ(*t.number(1, "ccd_class_1"), 1.1);
  double seg = 0.0;
  for (const auto& it : r.iterations) seg += it.losses.seg;
  EXPECT_EQ(*t.number(1, "loss_seg"), seg / 4.0);
  EXPECT_EQ(*t.number(1, "dstat_tgt"), 0.02);
  EXPECT_EQ(t.rows[1][t.column("method")], "clan");
}

TEST(Export, CsvAndJsonAreByteDeterministic) {
  const RunRecord r = sample_run();
  EXPECT_EQ(metrics_csv(r), metrics_csv(sample_run()));
  EXPECT_EQ(run_record_jsonl(r), run_record_jsonl(sample_run()));
}

TEST(Export, JsonlRoundTrip) {
  const RunRecord r = sample_run();
  std::istringstream in(run_record_jsonl(r));
  const RunRecord back = parse_run_record_jsonl(in);
  EXPECT_EQ(run_record_jsonl(back), run_record_jsonl(r));
  EXPECT_EQ(back.iterations.size(), 4u);
  EXPECT_FALSE(back.evals[0].iou[1].has_value());
}

TEST(Export, UnwritablePathIsAnError) {
  EXPECT_THROW(write_text_file("/nonexistent_dir_for_clan_forge/x.csv", "a"), std::runtime_error);
  EXPECT_THROW(save_run_record(sample_run(), "/nonexistent_dir_for_clan_forge/r.jsonl"), std::runtime_error);
}

TEST(Export, CcdPlotHasOneSeriesPerMethodPerClass) {
  RunRecord a = sample_run(), b = sample_run();
  b.method = "tan";
  const std::string svg = ccd_curves_svg({&a, &b});
  std::size_t lines = 0;
  for (std::size_t p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++lines;
  EXPECT_EQ(lines, 6u);
  EXPECT_NE(svg.find("tan class 2"), std::string::npos);
  EXPECT_NE(svg.find("iteration"), std::string::npos);
}

TEST(Export, BarAndLossPlotsAreWellFormed) {
  const RunRecord r = sample_run();
  for (const std::string& svg : {ccd_bars_svg({&r}), loss_plot_svg(r)}) {
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
  }
}
