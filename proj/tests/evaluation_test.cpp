#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "toa/evaluation.hpp"
#include "toa/trainer.hpp"

using namespace toa;

namespace {

Image random_image(std::uint64_t seed, std::size_t h = 32, std::size_t w = 32) {
  Rng rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(3, h, w);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

Image constant_image(float v, std::size_t h, std::size_t w) {
  Image img(3, h, w);
  std::fill(img.pixels.begin(), img.pixels.end(), v);
  return img;
}

Eigen::MatrixXd gaussian_rows(std::size_t n, const Eigen::VectorXd& mean, const Eigen::VectorXd& sd, Rng& rng) {
  std::normal_distribution<double> g;
  Eigen::MatrixXd x(long(n), mean.size());
  for (long i = 0; i < long(n); ++i)
    for (long k = 0; k < mean.size(); ++k) x(i, k) = mean(k) + sd(k) * g(rng);
  return x;
}

const TryOnModel<float>& tiny_model() {
  static const TryOnModel<float> m(tiny_model_config());
  return m;
}

std::vector<FigureSpec> test_specs(std::size_t n) {
  DatasetConfig c;
  c.train = 1;
  c.test = n;
  c.pretrain = 0;
  return make_dataset(c).test;
}

}  // namespace

TEST(Ssim, ReflexiveIsExactlyOne) {
  for (std::uint64_t s : {1u, 2u, 3u}) {
    const auto x = random_image(s);
    EXPECT_EQ(ssim(x, x), 1.0);
  }
  const auto flat = constant_image(0.4f, 8, 8);
  EXPECT_EQ(ssim(flat, flat), 1.0);
}

TEST(Ssim, SymmetricAndBounded) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto a = random_image(10 + s), b = random_image(20 + s);
    const double v = ssim(a, b);
    EXPECT_EQ(v, ssim(b, a));
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

// Constant images have zero local variance, so only the luminance term is left.
TEST(Ssim, ConstantOffsetIsLuminanceOnly) {
  const auto a = constant_image(0.5f, 4, 4), b = constant_image(0.6f, 4, 4);
  const double mx = 0.5f, my = 0.6f, c1 = 1e-4;
  const double expect = (2 * mx * my + c1) / (mx * mx + my * my + c1);
  EXPECT_NEAR(ssim(a, b), expect, 1e-12);
}

TEST(Ssim, InvariantToChannelPermutation) {
  auto a = random_image(31), b = random_image(32);
  const double before = ssim(a, b);
  auto permute = [](Image img) {
    const std::size_t n = img.height * img.width;
    Image out = img;
    for (std::size_t c = 0; c < 3; ++c)
      std::copy_n(img.pixels.begin() + long(((c + 1) % 3) * n), n, out.pixels.begin() + long(c * n));
    return out;
  };
  EXPECT_NEAR(ssim(permute(a), permute(b)), before, 1e-12);
}

TEST(Ssim, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(ssim(random_image(1, 8, 8), random_image(1, 8, 9)), DimensionError);
}

TEST(Frechet, IdenticalSetsAreZero) {
  Rng rng(1);
  const auto x = gaussian_rows(300, Eigen::VectorXd::Zero(6), Eigen::VectorXd::Ones(6), rng);
  EXPECT_NEAR(frechet_distance(x, x), 0.0, 1e-6);
}

// In one dimension the distance reduces to (muA - muB)^2 + (sdA - sdB)^2.
TEST(Frechet, OneDimensionalClosedForm) {
  Rng rng(2);
  const std::size_t n = 5000;
  const auto a = gaussian_rows(n, Eigen::VectorXd::Constant(1, 1.0), Eigen::VectorXd::Constant(1, 2.0), rng);
  const auto b = gaussian_rows(n, Eigen::VectorXd::Constant(1, -0.5), Eigen::VectorXd::Constant(1, 0.5), rng);
  auto sample_sd = [](const Eigen::MatrixXd& x) {
    const double m = x.mean();
    return std::sqrt((x.array() - m).square().sum() / double(x.rows() - 1) + 1e-6);
  };
  const double d = frechet_distance(a, b);
  const double plug_in = std::pow(a.mean() - b.mean(), 2) + std::pow(sample_sd(a) - sample_sd(b), 2);
  EXPECT_NEAR(d, plug_in, 1e-9);
  // Population value 1.5^2 + 1.5^2; delta-method standard deviation is about 0.107.
  EXPECT_NEAR(d, 4.5, 3 * 0.107);
}

// |dmu|^2 has variance 8|m|^2/n when each mean carries covariance I/n.
TEST(Frechet, ShiftedIsotropicGaussians) {
  Rng rng(3);
  const std::size_t n = 5000, dim = 4;
  Eigen::VectorXd m(dim);
  m << 0.5, -0.5, 0.5, -0.5;
  const auto a = gaussian_rows(n, Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Ones(dim), rng);
  const auto b = gaussian_rows(n, m, Eigen::VectorXd::Ones(dim), rng);
  const double sigma = std::sqrt(8 * m.squaredNorm() / double(n));
  EXPECT_NEAR(frechet_distance(a, b), m.squaredNorm(), 3 * sigma);
}

TEST(Frechet, InvariantToOrderAndOrthogonalMaps) {
  Rng rng(4);
  const std::size_t n = 400, dim = 5;
  Eigen::VectorXd sd(dim);
  sd << 1.0, 0.5, 2.0, 1.5, 0.8;
  const auto a = gaussian_rows(n, Eigen::VectorXd::Zero(dim), sd, rng);
  const auto b = gaussian_rows(n, Eigen::VectorXd::Constant(dim, 0.3), sd.reverse(), rng);
  const double base = frechet_distance(a, b);
  EXPECT_GE(base, 0.0);

  std::vector<long> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  Eigen::MatrixXd shuffled(a.rows(), a.cols());
  for (long i = 0; i < long(n); ++i) shuffled.row(i) = a.row(order[std::size_t(i)]);
  EXPECT_NEAR(frechet_distance(shuffled, b), base, 1e-9 * std::max(1.0, base));

  const auto g = gaussian_rows(dim, Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Ones(dim), rng);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  EXPECT_NEAR(frechet_distance(a * q, b * q), base, 1e-8 * std::max(1.0, base));
}

TEST(Frechet, TooFewSamplesAreStatisticsErrors) {
  Rng rng(5);
  const auto small = gaussian_rows(4, Eigen::VectorXd::Zero(6), Eigen::VectorXd::Ones(6), rng);
  EXPECT_THROW(frechet_distance(small, small, 0.0), StatisticsError);
  EXPECT_NO_THROW(frechet_distance(small, small, 1e-6));
  EXPECT_THROW(frechet_distance(small.topRows(1), small, 1e-6), StatisticsError);
  EXPECT_THROW(frechet_distance(small, small.leftCols(3)), DimensionError);
}

TEST(Derangement, NoFixedPointAndDeterministic) {
  for (std::size_t n : {2u, 3u, 10u, 200u}) {
    const auto p = derangement(n, 9);
    std::set<std::size_t> seen(p.begin(), p.end());
    EXPECT_EQ(seen.size(), n);
    EXPECT_EQ(*seen.rbegin(), n - 1);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NE(p[i], i);
    EXPECT_EQ(p, derangement(n, 9));
  }
  EXPECT_NE(derangement(50, 1), derangement(50, 2));
  EXPECT_THROW(derangement(1, 0), DataError);
}

TEST(EvalReport, JsonRoundTripIsLossless) {
  EvalReport r;
  r.protocol = Protocol::paired;
  r.ssim_mean = 0.61234567890123;
  r.ssim_std = 0.05;
  r.frechet_distance = 1.0 / 3.0;
  r.garment_color_acc = 0.925;
  r.face_id_acc = 0.875;
  r.pose_acc = 0.5;
  r.n_samples = 200;
  r.seed = 123456789012345ull;
  r.steps = 100;
  r.guidance = 3.0;
  const auto j = to_json_value(r);
  EXPECT_EQ(to_json_value(eval_report_from_json(j)), j);
  EXPECT_TRUE(j["lpips"].is_null());
  EXPECT_EQ(j["reference_values"]["FID_unpaired"].get<double>(), 7.23);

  r.protocol = Protocol::unpaired;
  r.ssim_mean.reset();
  r.ssim_std.reset();
  r.pose_acc.reset();
  const auto u = to_json_value(r);
  EXPECT_TRUE(u["ssim_mean"].is_null());
  EXPECT_EQ(to_json_value(eval_report_from_json(u)), u);
}

TEST(EvalReport, CsvRowMatchesHeader) {
  EvalReport r;
  auto commas = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  EXPECT_EQ(commas(eval_csv_header()), commas(eval_csv_row(r)));
}

TEST(Protocols, OracleBypassPairedIsPerfect) {
  const auto specs = test_specs(24);
  EvalOptions opt;
  opt.n = 24;
  opt.oracle_bypass = true;
  opt.with_pose = true;
  const auto r = run_paired_eval(tiny_model(), specs, opt);
  EXPECT_EQ(r.n_samples, 24u);
  EXPECT_NEAR(r.frechet_distance, 0.0, 1e-6);
  EXPECT_EQ(*r.ssim_mean, 1.0);
  EXPECT_EQ(*r.ssim_std, 0.0);
  EXPECT_EQ(r.garment_color_acc, 1.0);
  EXPECT_EQ(r.face_id_acc, 1.0);
  EXPECT_EQ(*r.pose_acc, 1.0);
}

// With ground truth in place of generation, identity always matches the face
// donor while the top color matches only where the two donors agree.
TEST(Protocols, UnpairedJudgesEachAttributeAgainstItsDonor) {
  const auto specs = test_specs(30);
  EvalOptions opt;
  opt.n = 30;
  opt.oracle_bypass = true;
  const auto cases = run_eval_cases<float>(nullptr, specs, Protocol::unpaired, opt);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    EXPECT_NE(nlohmann::json(cases[i].face_donor.spec), nlohmann::json(cases[i].garment_donor.spec));
    agree += cases[i].face_donor.spec.top_color == cases[i].garment_donor.spec.top_color;
  }
  const auto r = score_cases(tiny_model().encoder, cases, Protocol::unpaired, opt);
  EXPECT_FALSE(r.ssim_mean.has_value());
  EXPECT_FALSE(r.pose_acc.has_value());
  EXPECT_EQ(r.face_id_acc, 1.0);
  EXPECT_DOUBLE_EQ(r.garment_color_acc, double(agree) / 30.0);
}

TEST(Protocols, SplitSizeErrors) {
  EvalOptions opt;
  opt.oracle_bypass = true;
  EXPECT_THROW(run_paired_eval(tiny_model(), {}, opt), DataError);
  EXPECT_THROW(run_unpaired_eval(tiny_model(), test_specs(1), opt), DataError);
}

// An untrained model's torso color does not depend on the garment, so the
// accuracy sits at chance (1/8) up to binomial error.
TEST(Protocols, UntrainedModelIsNearChance) {
  const auto specs = test_specs(48);
  EvalOptions opt;
  opt.n = 48;
  opt.steps = 4;
  const auto r = run_unpaired_eval(tiny_model(), specs, opt);
  const double p = 1.0 / 8, sd = std::sqrt(p * (1 - p) / 48);
  EXPECT_LT(r.garment_color_acc, p + 3 * sd);
  EXPECT_GE(r.frechet_distance, 0.0);
  EXPECT_GE(r.face_id_acc, 0.0);
  EXPECT_LE(r.face_id_acc, 1.0);
}

TEST(TextEdit, CaptionAndGarmentColorsConflict) {
  const auto specs = test_specs(10);
  const auto r = run_text_edit_eval(tiny_model(), specs, 10, 4, 3);
  EXPECT_EQ(r.trials, 10u);
  EXPECT_LE(r.follows_caption + r.follows_garment, 1.0);
}

TEST(Oracle, VerifiedOnCleanRenders) {
  EXPECT_NO_THROW(verify_oracle(test_specs(50)));
}
