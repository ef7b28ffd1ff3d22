#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "ftrj/config.hpp"
#include "ftrj/data.hpp"

using namespace ftrj;

namespace {

struct Moments {
  Eigen::RowVectorXd mean, stddev;
};

Moments moments_of(const TimeSeriesDataset& ds, std::size_t label) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.labels[i] == label) idx.push_back(i);
  DenseMatrix x = ds.gather(idx);
  Moments m;
  m.mean = x.colwise().mean();
  DenseMatrix c = x.rowwise() - m.mean;
  m.stddev = (c.array().square().colwise().sum() / static_cast<double>(x.rows() - 1)).sqrt();
  return m;
}

}  // namespace

TEST(Synthetic, DefaultCountsAndTimes) {
  auto [ds, tree] = gen_synthetic({}, 0);
  EXPECT_EQ(ds.size(), 1075u);
  EXPECT_EQ(tree.num_classes(), 5u);
  std::vector<std::size_t> per_class(5, 0);
  for (auto l : ds.labels) ++per_class[l];
  EXPECT_EQ(per_class, (std::vector<std::size_t>{500, 25, 25, 25, 500}));
  EXPECT_EQ(ds.points_at(0.0).rows(), 500);
  EXPECT_EQ(ds.points_at(2.0).rows(), 500);
  EXPECT_EQ(ds.training_pair(), std::make_pair(0.0, 2.0));
  EXPECT_EQ(ds.times_with(TimeRole::heldout), std::vector<double>{1.0});
  ds.validate(5);
}

TEST(Synthetic, TimedDistractorsPutAllIntermediatesAtOne) {
  SyntheticConfig cfg;
  cfg.distractors_timed = true;
  auto [ds, tree] = gen_synthetic(cfg, 0);
  EXPECT_EQ(ds.points_at(1.0).rows(), 75);
}

TEST(Synthetic, Deterministic) {
  auto [a, ta] = gen_synthetic({}, 42);
  auto [b, tb] = gen_synthetic({}, 42);
  EXPECT_EQ(std::memcmp(a.points.data(), b.points.data(), sizeof(double) * static_cast<std::size_t>(a.points.size())), 0);
  EXPECT_EQ(a.labels, b.labels);
  auto [c, tc] = gen_synthetic({}, 43);
  EXPECT_NE(a.points, c.points);
}

TEST(Synthetic, EndpointClusterSpread) {
  auto [ds, tree] = gen_synthetic({}, 7);
  for (std::size_t label : {0u, 4u}) {
    auto m = moments_of(ds, label);
    for (Eigen::Index d = 0; d < 2; ++d) {
      EXPECT_GE(m.stddev[d], 0.08);
      EXPECT_LE(m.stddev[d], 0.12);
    }
  }
  EXPECT_NEAR(moments_of(ds, 0).mean[0], -1.0, 0.03);
  EXPECT_NEAR(moments_of(ds, 4).mean[0], 1.0, 0.03);
}

// y -> -y symmetry with classes 1 and 3 swapped; tolerances are several
// standard errors for 25-point clusters.
TEST(Synthetic, MirrorSymmetryOfSideClusters) {
  auto [ds, tree] = gen_synthetic({}, 3);
  auto up = moments_of(ds, 1), down = moments_of(ds, 3);
  EXPECT_NEAR(up.mean[1], -down.mean[1], 0.1);
  EXPECT_NEAR(up.mean[0], down.mean[0], 0.1);
  EXPECT_NEAR(up.stddev[1], down.stddev[1], 0.06);
}

TEST(Synthetic, HighDimensionalEmbedding) {
  SyntheticConfig cfg;
  cfg.dim = 50;
  auto [ds, tree] = gen_synthetic(cfg, 0);
  EXPECT_EQ(ds.dim(), 50u);
  auto m = moments_of(ds, 0);
  EXPECT_NEAR(m.mean[0], -1.0, 0.03);
  EXPECT_NEAR(m.mean[10], 0.0, 0.03);
  EXPECT_NEAR(m.stddev[30], 0.1, 0.02);
}

TEST(Synthetic, InvalidCountsRejected) {
  SyntheticConfig cfg;
  cfg.endpoint_count = 0;
  EXPECT_THROW(gen_synthetic(cfg, 0), Error);
  cfg = {};
  cfg.cluster_std = 0;
  EXPECT_THROW(gen_synthetic(cfg, 0), Error);
}

TEST(DatasetCsv, EmptyBody) {
  std::istringstream is("t,label,x_1,x_2\n");
  try {
    load_dataset(is);
    FAIL() << "expected error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("no data rows"), std::string::npos);
    EXPECT_EQ(e.kind(), ErrorKind::data);
  }
}

TEST(DatasetCsv, SingleRow) {
  std::istringstream is("t,label,x_1,x_2\n0,1,0.5,-0.25\n");
  auto ds = load_dataset(is);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.labels[0], 1u);
  EXPECT_EQ(ds.points(0, 1), -0.25);
}

TEST(DatasetCsv, MalformedRows) {
  std::istringstream short_row("t,label,x_1,x_2\n0,1,0.5\n");
  EXPECT_THROW(load_dataset(short_row), Error);
  std::istringstream bad_number("t,label,x_1\n0,1,abc\n");
  EXPECT_THROW(load_dataset(bad_number), Error);
  std::istringstream bad_label("t,label,x_1\n0,7,1\n");
  EXPECT_THROW(load_dataset(bad_label, 5), Error);
}

TEST(DatasetCsv, RandomRoundTripExact) {
  Rng rng(5);
  std::normal_distribution<double> g(0.0, 3.0);
  TimeSeriesDataset ds;
  ds.points.resize(100, 3);
  for (Eigen::Index i = 0; i < 100; ++i) {
    for (Eigen::Index d = 0; d < 3; ++d) ds.points(i, d) = g(rng);
    ds.labels.push_back(static_cast<std::size_t>(i % 4));
    ds.times.push_back(i % 5 == 4 ? kUntimed : static_cast<double>(i % 3) * 0.5);
  }
  ds.roles = {{0.0, TimeRole::train}, {0.5, TimeRole::heldout}, {1.0, TimeRole::train}};
  std::stringstream ss;
  save_dataset(ds, ss);
  auto back = load_dataset(ss, 4);
  EXPECT_EQ(back.points, ds.points);
  EXPECT_EQ(back.labels, ds.labels);
  ASSERT_EQ(back.times.size(), ds.times.size());
  for (std::size_t i = 0; i < ds.times.size(); ++i) {
    if (is_untimed(ds.times[i]))
      EXPECT_TRUE(is_untimed(back.times[i]));
    else
      EXPECT_EQ(back.times[i], ds.times[i]);
  }
  EXPECT_EQ(back.roles, ds.roles);
}

TEST(DatasetCsv, DefaultRolesWithoutRolesLine) {
  std::istringstream is("t,label,x_1\n0,0,1\n1,0,1\n2,0,1\n");
  auto ds = load_dataset(is);
  EXPECT_EQ(ds.role_of(0.0), TimeRole::train);
  EXPECT_EQ(ds.role_of(1.0), TimeRole::heldout);
  EXPECT_EQ(ds.role_of(2.0), TimeRole::train);
  set_heldout(ds, {});
  EXPECT_EQ(ds.role_of(1.0), TimeRole::train);
  EXPECT_THROW(set_heldout(ds, {3.0}), Error);
}

TEST(Config, EmptyIsDefaults) {
  std::istringstream is("");
  auto cfg = parse_config(is);
  ExperimentConfig def;
  EXPECT_EQ(cfg.entries(), def.entries());
  EXPECT_EQ(cfg.finsler_lambda, 1.0);
  EXPECT_EQ(cfg.classifier_batch, 512u);
}

TEST(Config, LambdaParses) {
  std::istringstream is("# sweep point\nfinsler.lambda = 0.5\n");
  EXPECT_EQ(parse_config(is).finsler_lambda, 0.5);
}

TEST(Config, NegativeLambdaRejectedWithKey) {
  std::istringstream is("finsler.lambda = -1\n");
  try {
    parse_config(is);
    FAIL() << "expected error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
    EXPECT_NE(std::string(e.what()).find("finsler.lambda"), std::string::npos);
  }
}

TEST(Config, UnknownKeyAndTypeErrors) {
  std::istringstream unknown("finsler.lamda = 1\n");
  EXPECT_THROW(parse_config(unknown), Error);
  std::istringstream type("train.iters = many\n");
  EXPECT_THROW(parse_config(type), Error);
  std::istringstream neg("train.iters = -3\n");
  EXPECT_THROW(parse_config(neg), Error);
  std::istringstream no_eq("train.iters 3\n");
  EXPECT_THROW(parse_config(no_eq), Error);
}

TEST(Config, EchoRoundTrip) {
  ExperimentConfig cfg;
  cfg.finsler_lambda = 0.2;
  cfg.synthetic.distractors_timed = true;
  cfg.data_heldout = "1";
  std::istringstream is(echo_config(cfg));
  EXPECT_EQ(parse_config(is).entries(), cfg.entries());
}

TEST(Config, TimeList) {
  EXPECT_EQ(parse_time_list("1, 2.5,"), (std::vector<double>{1.0, 2.5}));
  EXPECT_TRUE(parse_time_list("").empty());
}
