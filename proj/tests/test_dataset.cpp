#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <set>

#include "hpr/dataset.hpp"
#include "hpr/error.hpp"

using namespace hpr;

namespace {
GeneratorConfig small(std::uint64_t seed = 3) {
  GeneratorConfig g;
  g.classes = 4;
  g.dims = 6;
  g.per_class = 50;
  g.seed = seed;
  return g;
}
}  // namespace

TEST(Dataset, GeneratorIsDeterministicBalancedAndBoxed) {
  const Dataset a = generate(small()), b = generate(small()), c = generate(small(4));
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.features, c.features);
  EXPECT_EQ(a.size(), 200u);
  EXPECT_EQ(a.class_counts(), (std::vector<std::size_t>{50, 50, 50, 50}));
  EXPECT_NO_THROW(a.validate(true));
  // min-max normalised: every feature touches both ends of the box
  for (std::size_t j = 0; j < a.dims; ++j) {
    double lo = 1.0, hi = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      lo = std::min(lo, a.row(i)[j]);
      hi = std::max(hi, a.row(i)[j]);
    }
    EXPECT_DOUBLE_EQ(lo, 0.0);
    EXPECT_DOUBLE_EQ(hi, 1.0);
  }
}

TEST(Dataset, GeneratorRejectsDegenerateConfigs) {
  auto g = small();
  g.spread = 0.0;
  EXPECT_THROW(generate(g), InvalidArgument);
  g = small();
  g.classes = 1;
  EXPECT_THROW(generate(g), InvalidArgument);
}

TEST(Dataset, StratifiedSplit) {
  const Dataset ds = generate(small());
  const Split s = split_validation(ds, 0.2, 5);
  EXPECT_EQ(s.val.class_counts(), (std::vector<std::size_t>{10, 10, 10, 10}));
  std::vector<std::size_t> all = s.train_indices;
  all.insert(all.end(), s.val_indices.begin(), s.val_indices.end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> want(ds.size());
  std::iota(want.begin(), want.end(), 0);
  EXPECT_EQ(all, want);
  EXPECT_THROW(split_validation(ds, 1.0, 5), InvalidArgument);
}

TEST(Dataset, PartitionsCoverAndStayDisjoint) {
  const Dataset ds = generate(small());
  for (auto scheme : {PartitionScheme::kIidDisjoint, PartitionScheme::kDirichlet}) {
    PartitionSpec p;
    p.scheme = scheme;
    p.nodes = 3;
    p.seed = 12;
    const auto parts = partition_indices(ds, p);
    std::multiset<std::size_t> seen;
    for (const auto& part : parts) seen.insert(part.begin(), part.end());
    EXPECT_EQ(seen.size(), ds.size());
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), ds.size());
  }
  PartitionSpec iid;
  iid.scheme = PartitionScheme::kIidDisjoint;
  iid.nodes = 3;
  const auto sizes = partition_indices(ds, iid);
  EXPECT_EQ(sizes[0].size(), 67u);
  EXPECT_EQ(sizes[2].size(), 66u);

  PartitionSpec full;
  full.scheme = PartitionScheme::kFullReplicated;
  full.nodes = 4;
  for (const auto& part : partition_indices(ds, full)) EXPECT_EQ(part.size(), ds.size());

  PartitionSpec bad;
  bad.scheme = PartitionScheme::kCentralized;
  bad.nodes = 2;
  EXPECT_THROW(partition_indices(ds, bad), InvalidArgument);
}

TEST(Dataset, DirichletMomentsMatchTheory) {
  // Dir(a * 1_n): E[p_i] = 1/n, Var[p_i] = (n - 1) / (n^2 (n a + 1)).
  const double a = 0.9;
  const std::size_t n = 4, draws = 40000;
  CounterRng rng(77);
  double s = 0.0, ss = 0.0;
  for (std::size_t t = 0; t < draws; ++t) {
    const auto p = sample_dirichlet(a, n, rng);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
    s += p[0];
    ss += p[0] * p[0];
  }
  const double mean = s / draws, var = ss / draws - mean * mean;
  const double want_var = (n - 1.0) / (n * n * (n * a + 1.0));
  EXPECT_NEAR(mean, 0.25, 0.005);
  EXPECT_NEAR(var, want_var, 0.05 * want_var);
}

TEST(Dataset, SmallAlphaSkewsShards) {
  const Dataset ds = generate(small());
  PartitionSpec p;
  p.scheme = PartitionScheme::kDirichlet;
  p.nodes = 3;
  p.alpha = 0.05;
  p.seed = 1;
  std::size_t dominant = 0;
  for (const auto& part : partition_indices(ds, p)) {
    std::vector<std::size_t> counts(4, 0);
    for (std::size_t i : part) ++counts[ds.labels[i]];
    dominant += *std::max_element(counts.begin(), counts.end());
  }
  // near one-hot class proportions put most of every class on one node
  EXPECT_GT(dominant, ds.size() / 2);
}

TEST(Dataset, FileRoundTrip) {
  const Dataset ds = generate(small());
  const std::string bytes = serialize_dataset(ds);
  const Dataset back = parse_dataset(bytes);
  EXPECT_EQ(back.features, ds.features);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_THROW(parse_dataset(bytes.substr(0, 20)), FormatError);
  EXPECT_THROW(parse_dataset("NOPE" + bytes.substr(4)), FormatError);

  const auto path = std::filesystem::temp_directory_path() / "hpr_test_ds.bin";
  save_dataset(path, ds);
  EXPECT_TRUE(std::filesystem::exists(manifest_path(path)));
  const Dataset loaded = load_dataset(path);
  EXPECT_EQ(loaded.features, ds.features);
  std::filesystem::remove(path);
  std::filesystem::remove(manifest_path(path));
}

TEST(Dataset, SubsetAndGather) {
  const Dataset ds = generate(small());
  const std::vector<std::size_t> ids{3, 0, 7};
  const Dataset sub = ds.subset(ids);
  EXPECT_EQ(sub.size(), 3u);
  EXPECT_EQ(sub.labels[0], ds.labels[3]);
  EXPECT_EQ(ds.gather(ids).shape(), (Shape{3, 6}));
  const std::vector<std::size_t> oob{1000};
  EXPECT_THROW(ds.subset(oob), InvalidArgument);
}
