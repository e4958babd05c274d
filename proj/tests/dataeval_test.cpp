#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "condcl/dataeval.hpp"
#include "test_util.hpp"

namespace condcl {
namespace {

namespace fs = std::filesystem;

using test::TempDir;
using test::read_bytes;
using test::write_bytes;

// Record 0: label 3, pixel k = k mod 256. Record 1: label 9, pixel k = 255 - (k mod 256).
std::vector<unsigned char> two_record_fixture() {
  std::vector<unsigned char> b;
  b.push_back(3);
  for (int k = 0; k < 3072; ++k) b.push_back(static_cast<unsigned char>(k % 256));
  b.push_back(9);
  for (int k = 0; k < 3072; ++k) b.push_back(static_cast<unsigned char>(255 - k % 256));
  return b;
}

TEST(Cifar, RecoversFixtureExactly) {
  TempDir dir;
  write_bytes(dir.file("f.bin"), two_record_fixture());
  const Dataset ds = load_cifar10_binary({dir.file("f.bin")});
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.labels, (std::vector<int>{3, 9}));
  EXPECT_EQ(ds.meta[1].categorical, std::vector<int>{9});
  EXPECT_EQ(ds.image_side, 32u);
  EXPECT_EQ(ds.channels, 3u);
  EXPECT_EQ(ds.inputs(0, 0), 0.0);
  EXPECT_EQ(ds.inputs(0, 255), 1.0);
  EXPECT_EQ(ds.inputs(0, 1024 + 17), 17.0 / 255.0);
  EXPECT_EQ(ds.inputs(1, 0), 1.0);
  EXPECT_EQ(ds.inputs(1, 3071), (255.0 - 3071 % 256) / 255.0);
}

TEST(Cifar, ConcatenatesFiles) {
  TempDir dir;
  write_bytes(dir.file("a.bin"), two_record_fixture());
  write_bytes(dir.file("b.bin"), two_record_fixture());
  EXPECT_EQ(load_cifar10_binary({dir.file("a.bin"), dir.file("b.bin")}).size(), 4u);
}

TEST(Cifar, EmptyFileGivesEmptyDataset) {
  TempDir dir;
  write_bytes(dir.file("e.bin"), {});
  const Dataset ds = load_cifar10_binary({dir.file("e.bin")});
  EXPECT_EQ(ds.size(), 0u);
  EXPECT_EQ(ds.inputs.cols(), 3072u);
}

TEST(Cifar, MalformedFilesAreRejected) {
  TempDir dir;
  write_bytes(dir.file("t.bin"), std::vector<unsigned char>(3072, 0));
  EXPECT_THROW(load_cifar10_binary({dir.file("t.bin")}), FormatError);
  auto bad = two_record_fixture();
  bad[3073] = 10;
  write_bytes(dir.file("l.bin"), bad);
  EXPECT_THROW(load_cifar10_binary({dir.file("l.bin")}), FormatError);
  EXPECT_THROW(load_cifar10_binary({dir.file("missing.bin")}), FormatError);
}

TEST(Cifar, RoundTripIsLossless) {
  TempDir dir;
  const auto bytes = two_record_fixture();
  write_bytes(dir.file("f.bin"), bytes);
  save_cifar10_binary(load_cifar10_binary({dir.file("f.bin")}), dir.file("g.bin"));
  EXPECT_EQ(read_bytes(dir.file("g.bin")), bytes);
}

Dataset solid_images(double r, double g, double b) {
  Dataset ds;
  ds.image_side = 32;
  ds.channels = 3;
  ds.inputs = Matrix(1, 3072);
  for (int k = 0; k < 1024; ++k) ds.inputs(0, k) = r, ds.inputs(0, 1024 + k) = g, ds.inputs(0, 2048 + k) = b;
  ds.labels = {0};
  ds.meta = {MetaRecord{{}, {0}}};
  return ds;
}

TEST(DownsampleGray, WhiteStaysWhite) {
  const Dataset out = downsample_gray(solid_images(1, 1, 1), 8);
  ASSERT_EQ(out.inputs.cols(), 64u);
  for (double v : out.inputs.values()) EXPECT_NEAR(v, 1.0, 1e-15);
  EXPECT_EQ(out.image_side, 8u);
  EXPECT_EQ(out.channels, 1u);
  EXPECT_EQ(out.labels, std::vector<int>{0});
}

TEST(DownsampleGray, FullSideIsLuminanceOnly) {
  const Dataset out = downsample_gray(solid_images(1, 0, 0), 32);
  ASSERT_EQ(out.inputs.cols(), 1024u);
  for (double v : out.inputs.values()) EXPECT_DOUBLE_EQ(v, 0.299);
}

TEST(DownsampleGray, CheckerboardAveragesToHalf) {
  Dataset ds = solid_images(0, 0, 0);
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c)
      if ((r + c) % 2 == 0)
        for (int ch = 0; ch < 3; ++ch) ds.inputs(0, ch * 1024 + r * 32 + c) = 1.0;
  const Dataset out = downsample_gray(ds, 16);
  for (double v : out.inputs.values()) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(DownsampleGray, RejectsBadShapes) {
  EXPECT_THROW(downsample_gray(solid_images(1, 1, 1), 5), ShapeMismatchError);
  Dataset flat;
  flat.inputs = Matrix(1, 10);
  EXPECT_THROW(downsample_gray(flat, 8), ShapeMismatchError);
}

TEST(SyntheticDataset, NoiselessIsLinearlySeparable) {
  SyntheticModel m = default_class_model();
  m.kappa = std::numeric_limits<double>::infinity();
  Rng rng(1);
  const Dataset ds = make_synthetic_dataset(m, 90, 0, rng);
  const ProbeResult r = linear_probe(ds.inputs, ds.labels, ds.inputs, ds.labels);
  EXPECT_EQ(r.top1_accuracy, 1.0);
}

TEST(SyntheticDataset, SingletonAndValidation) {
  Rng rng(2);
  const Dataset ds = make_synthetic_dataset(default_class_model(), 1, 4, rng);
  EXPECT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.inputs.cols(), 7u);
  EXPECT_NO_THROW(ds.validate());
  EXPECT_THROW(make_synthetic_dataset(default_synthetic_model(), 5, 0, rng), InvalidArgument);
  EXPECT_THROW(make_synthetic_dataset(default_class_model(), 0, 0, rng), InvalidArgument);
}

TEST(SyntheticDataset, InputsInUnitRangeAndMetaNearClassValue) {
  Rng rng(3);
  const Dataset ds = make_synthetic_dataset(default_class_model(), 3000, 16, rng);
  for (double v : ds.inputs.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  double err = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) err += ds.meta[i].continuous[0] - 5.0 * ds.labels[i];
  EXPECT_NEAR(err / ds.size(), 0.0, 0.1);
}

TEST(SyntheticDataset, DefaultTaskIsNontrivialButLearnable) {
  // k-NN oracle on raw inputs fixes the learnability band
  Rng rng(100);
  const Dataset train = make_synthetic_dataset(default_class_model(), 2000, 16, rng);
  const Dataset test = make_synthetic_dataset(default_class_model(), 1000, 16, rng);
  const double acc = knn_accuracy(train.inputs, train.labels, test.inputs, test.labels, 5);
  EXPECT_GE(acc, 0.6);
  EXPECT_LE(acc, 0.9);
}

TEST(KnnAccuracy, SeparatedClusters) {
  const Matrix train{{0, 0}, {0, 1}, {1, 0}, {10, 10}, {10, 11}, {11, 10}};
  const std::vector<int> tl{0, 0, 0, 1, 1, 1};
  const Matrix test{{0.5, 0.5}, {10.5, 10.5}};
  EXPECT_EQ(knn_accuracy(train, tl, test, std::vector<int>{0, 1}, 3), 1.0);
  EXPECT_EQ(knn_accuracy(train, tl, test, std::vector<int>{1, 0}, 3), 0.0);
  EXPECT_THROW(knn_accuracy(train, tl, test, std::vector<int>{0, 1}, 7), InvalidArgument);
}

TrainConfig tiny_train_config() {
  TrainConfig c;
  c.batch_size = 32;
  c.epochs = 3;
  c.hidden = {16};
  c.embed_dim = 4;
  c.sigma = 2.0;
  c.loss_kind = LossKind::align_cond;
  return c;
}

TEST(ExtractFeatures, RandomInitIsUnitNormAndDeterministic) {
  Rng rng(4);
  const Dataset ds = make_synthetic_dataset(default_class_model(), 50, 4, rng);
  const Checkpoint ck = initial_checkpoint(tiny_train_config(), ds.inputs.cols());
  const Matrix f = extract_features(ck, ds);
  EXPECT_TRUE(f.all_finite());
  for (std::size_t i = 0; i < f.rows(); ++i) EXPECT_NEAR(norm(f.row(i)), 1.0, 1e-12);
  EXPECT_EQ(f, extract_features(ck, ds));
}

TEST(ExtractFeatures, TrainingChangesFeatures) {
  Rng rng(5);
  const Dataset ds = make_synthetic_dataset(default_class_model(), 128, 4, rng);
  const auto cfg = tiny_train_config();
  const Matrix before = extract_features(initial_checkpoint(cfg, ds.inputs.cols()), ds);
  const Matrix after = extract_features(train(cfg, ds).checkpoint, ds);
  EXPECT_GT(max_abs_diff(before, after), 1e-3);
}

TEST(ExtractFeatures, WidthMismatchThrows) {
  Rng rng(6);
  const Dataset ds = make_synthetic_dataset(default_class_model(), 5, 4, rng);
  EXPECT_THROW(extract_features(initial_checkpoint(tiny_train_config(), 3), ds), ShapeMismatchError);
}

TEST(LinearProbe, OrthogonalClustersArePerfect) {
  Matrix f(30, 3);
  std::vector<int> y(30);
  for (std::size_t i = 0; i < 30; ++i) {
    y[i] = static_cast<int>(i % 3);
    f(i, i % 3) = 1.0;
  }
  const ProbeResult r = linear_probe(f, y, f, y);
  EXPECT_EQ(r.top1_accuracy, 1.0);
  EXPECT_EQ(r.per_class_accuracy, (std::vector<double>{1.0, 1.0, 1.0}));
  EXPECT_EQ(r.n_train, 30u);
  EXPECT_EQ(r.probe_epochs, 500u);
}

TEST(LinearProbe, ShuffledLabelsAreAtChance) {
  Rng rng(7);
  const std::size_t n = 2000, c = 4;
  const Matrix f = random_sphere(n, 8, rng);
  std::vector<int> train_y(n), test_y(n);
  for (auto& y : train_y) y = static_cast<int>(rng.below(c));
  for (auto& y : test_y) y = static_cast<int>(rng.below(c));
  const Matrix test_f = random_sphere(n, 8, rng);
  const ProbeResult r = linear_probe(f, train_y, test_f, test_y);
  const double p = 1.0 / c, se = std::sqrt(p * (1 - p) / n);
  EXPECT_NEAR(r.top1_accuracy, p, 3 * se);
}

TEST(LinearProbe, SingleClassTestSet) {
  const Matrix train_f{{1, 0}, {0, 1}, {1, 0}, {0, 1}};
  const std::vector<int> train_y{0, 1, 0, 1};
  const ProbeResult r = linear_probe(train_f, train_y, Matrix{{1, 0}, {1, 0}}, std::vector<int>{0, 0});
  EXPECT_EQ(r.top1_accuracy, 1.0);
  EXPECT_EQ(r.per_class_count, (std::vector<std::size_t>{2, 0}));
}

TEST(LinearProbe, AbsentClassIsDegenerate) {
  const Matrix f{{1, 0}, {0, 1}};
  EXPECT_THROW(linear_probe(f, std::vector<int>{0, 2}, f, std::vector<int>{0, 2}), DegenerateLabelsError);
  EXPECT_THROW(linear_probe(f, std::vector<int>{0, 1}, f, std::vector<int>{0, 5}), DegenerateLabelsError);
}

TEST(LinearProbe, LossNeverIncreasesAndIsDeterministic) {
  Rng rng(8);
  const Dataset ds = make_synthetic_dataset(default_class_model(), 300, 16, rng);
  const Matrix f = extract_features(initial_checkpoint(tiny_train_config(), ds.inputs.cols()), ds);
  const ProbeResult a = linear_probe(f, ds.labels, f, ds.labels);
  for (std::size_t e = 1; e < a.loss_history.size(); ++e) EXPECT_LE(a.loss_history[e], a.loss_history[e - 1]);
  EXPECT_EQ(a, linear_probe(f, ds.labels, f, ds.labels));
}

TEST(RepresentationMetrics, CollapsedFeatures) {
  const std::size_t n = 6;
  Matrix f(n, 3);
  MetaBatch meta(n);
  for (std::size_t i = 0; i < n; ++i) {
    f(i, 0) = 1.0;
    meta[i].continuous = {static_cast<double>(i)};
  }
  LossConfig lc;
  lc.tau = 1.0;
  const auto m = representation_metrics(f, meta, KernelConfig::make(KernelFamily::rbf, 1.0), lc);
  EXPECT_NEAR(m.align_score, -1.0, 1e-15);
  EXPECT_NEAR(m.global_unif_score, 1.0, 1e-15);
  ASSERT_TRUE(m.cond_unif_score.has_value());
  EXPECT_NEAR(*m.cond_unif_score, 1.0, 1e-14);
}

TEST(RepresentationMetrics, AllSimilarLeavesConditionalAbsent) {
  Rng rng(9);
  const Matrix f = random_sphere(5, 3, rng);
  const MetaBatch meta(5, MetaRecord{{2.0}, {}});
  const auto m = representation_metrics(f, meta, KernelConfig::make(KernelFamily::rbf, 1.0), {});
  EXPECT_FALSE(m.cond_unif_score.has_value());
}

TEST(RepresentationMetrics, UniformCircleMatchesBessel) {
  // log I0(1), tests/oracles/loss_oracles.py
  const std::size_t n = 1024;
  Matrix f(n, 2);
  MetaBatch meta(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = 2.0 * std::numbers::pi * static_cast<double>(i) / n;
    f(i, 0) = std::cos(t);
    f(i, 1) = std::sin(t);
    meta[i].continuous = {static_cast<double>(i)};
  }
  LossConfig lc;
  lc.tau = 1.0;
  const auto m = representation_metrics(f, meta, KernelConfig::make(KernelFamily::rbf, 1.0), lc);
  EXPECT_NEAR(m.global_unif_score, 0.23591435850717864869, 1e-12);
}

TEST(RepresentationMetrics, PermutationInvariant) {
  Rng rng(10);
  const std::size_t n = 12;
  const Matrix f = random_sphere(n, 4, rng);
  const MetaBatch meta = test::random_meta(n, rng);
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  shuffle(std::span<std::size_t>(perm), rng);
  const auto k = KernelConfig::make(KernelFamily::rbf, 2.0);
  const auto a = representation_metrics(f, meta, k, {});
  const auto b = representation_metrics(gather_rows(f, perm), gather_meta(meta, perm), k, {});
  EXPECT_NEAR(a.align_score, b.align_score, 1e-12);
  EXPECT_NEAR(a.global_unif_score, b.global_unif_score, 1e-12);
  EXPECT_NEAR(*a.cond_unif_score, *b.cond_unif_score, 1e-12);
}

TEST(FeaturesCsv, Layout) {
  std::ostringstream os;
  write_features_csv(os, Matrix{{0.5, -0.25}}, std::vector<int>{2}, {MetaRecord{{1.5}, {1}}});
  EXPECT_EQ(os.str(), "f0,f1,label,meta_c0,meta_k0\n0.5,-0.25,2,1.5,1\n");
}

TEST(Csv, FormatsRoundTrip) {
  EXPECT_EQ(format_double(0.1), "0.10000000000000001");
  EXPECT_EQ(format_double(std::numeric_limits<double>::quiet_NaN()), "");
  EXPECT_EQ(format_double(std::optional<double>{}), "");
  EXPECT_EQ(std::stod(format_double(1.0 / 3.0)), 1.0 / 3.0);
}

}  // namespace
}  // namespace condcl
