#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "prima/errors.hpp"
#include "prima/soft_targets.hpp"

using namespace prima;

namespace {

MetadataSchema color_size_schema(double factor) {
  AttributeSpec color{"color", {"red", "blue"}, {}, true, true, false};
  AttributeSpec size{"size", {"s", "l"}, {}, false, true, false};
  return MetadataSchema({color, size}, factor);
}

MetadataSchema rich_schema() {
  std::vector<AttributeSpec> attrs = {
      {"site", {"arm", "leg", "face", "back"}, {}, true, true, false},
      {"smoker", {"yes", "no"}, {}, false, false, true},
      {"age", {}, {30.0, 50.0, 70.0}, false, true, false},
      {"itch", {"yes", "no"}, {}, true, true, false},
  };
  return MetadataSchema(std::move(attrs), 3.0);
}

}  // namespace

TEST_CASE("encoding upweights disease-related blocks") {
  const auto y = encode_metadata({{"color", "blue"}, {"size", "s"}}, color_size_schema(3.0));
  REQUIRE(y.size() == 4);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 3.0);
  CHECK(y[2] == 1.0);
  CHECK(y[3] == 0.0);

  const auto plain = encode_metadata({{"color", "red"}, {"size", "l"}}, color_size_schema(1.0));
  CHECK(plain == Vector((Vector(4) << 1, 0, 0, 1).finished()));
}

TEST_CASE("encoding errors and missing values") {
  const auto schema = rich_schema();
  CHECK_THROWS_AS(encode_metadata({{"color", "green"}, {"size", "s"}}, color_size_schema(3.0)),
                  SchemaError);
  CHECK_THROWS_AS(encode_metadata({{"color", "red"}}, color_size_schema(3.0)), SchemaError);
  CHECK_THROWS_AS(encode_metadata({{"color", "red"}, {"size", "s"}, {"shape", "x"}},
                                  color_size_schema(3.0)),
                  SchemaError);
  // smoker is nullable: its block gains a trailing missing level.
  const auto y = encode_metadata({{"site", "leg"}, {"age", "61"}, {"itch", "no"}}, schema);
  CHECK(y.size() == 4 + 3 + 4 + 2);
  CHECK(y[4 + 2] == 1.0);   // smoker: missing
  CHECK(y[7 + 2] == 1.0);   // age 61 -> bin2 (50..70)
  CHECK(y[1] == 3.0);       // site leg, upweighted
  // Self inner product is the same for every record of the schema.
  const auto z = encode_metadata({{"site", "arm"}, {"smoker", "yes"}, {"age", "20"}, {"itch", "yes"}}, schema);
  CHECK(y.squaredNorm() == z.squaredNorm());
}

TEST_CASE("label block is appended when requested") {
  auto schema = color_size_schema(3.0);
  schema.include_label({"a", "b", "c"});
  const auto y = encode_metadata({{"color", "red"}, {"size", "l"}}, schema, std::string("c"));
  CHECK(y.size() == 7);
  CHECK(y[6] == 3.0);
  CHECK_THROWS_AS(encode_metadata({{"color", "red"}, {"size", "l"}}, schema), SchemaError);
  CHECK_THROWS_AS(encode_metadata({{"color", "red"}, {"size", "l"}}, schema, std::string("z")),
                  SchemaError);
}

TEST_CASE("decode inverts encode on random records") {
  const auto schema = rich_schema();
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Metadata record;
    for (const auto& a : schema.attributes()) {
      if (a.nullable && rng.bernoulli(0.3)) continue;
      record[a.name] = a.levels[rng.index(a.levels.size())];
    }
    CHECK(decode_metadata(encode_metadata(record, schema), schema) == record);
  }
}

TEST_CASE("schema validation and json round trip") {
  CHECK_THROWS_AS(MetadataSchema({{"x", {"only"}, {}, false, true, false}}), SchemaError);
  CHECK_THROWS_AS(MetadataSchema({{"x", {"a", "b"}, {}, false, true, false}}, 0.0), SchemaError);
  CHECK_THROWS_AS(MetadataSchema({{"x", {}, {5.0, 1.0}, false, true, false}}), SchemaError);
  const auto schema = rich_schema();
  const auto again = MetadataSchema::from_json(schema.to_json());
  CHECK(again.to_json() == schema.to_json());
  CHECK(schema.disease_related() == std::vector<std::string>{"site", "itch"});
}

TEST_CASE("soft targets from identical metadata are uniform") {
  std::vector<Vector> y(5, (Vector(3) << 1, 0, 3).finished());
  const auto s = build_soft_targets(y, 0.5);
  CHECK((s.array() - 0.2).abs().maxCoeff() < 1e-15);
}

TEST_CASE("two-patient sharpening matches the direct formula") {
  Vector y1(3), y2(3);
  y1 << 3, 1, 0;  // <y1,y1> = 10
  y2 << 0, 2, 0;  // <y1,y2> = 2
  const auto s = build_soft_targets({y1, y2}, 1.0);
  const double sigma = std::exp(10.0) / (std::exp(10.0) + std::exp(2.0));
  CHECK(std::abs(s(0, 0) - sigma) < 1e-12);
  CHECK(s(0, 0) == doctest::Approx(0.999665).epsilon(1e-6));
  CHECK(std::abs(s(0, 1) - (1.0 - sigma)) < 1e-12);
  CHECK((s - oracle::soft_targets({y1, y2}, 1.0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("low label temperature approaches the identity") {
  const auto schema = rich_schema();
  std::vector<Vector> y = {
      encode_metadata({{"site", "arm"}, {"smoker", "yes"}, {"age", "20"}, {"itch", "yes"}}, schema),
      encode_metadata({{"site", "leg"}, {"smoker", "no"}, {"age", "40"}, {"itch", "no"}}, schema),
      encode_metadata({{"site", "arm"}, {"age", "80"}, {"itch", "yes"}}, schema),
  };
  // Diagonal margin: <y_i,y_i> - max_j <y_i,y_j> >= 1.
  for (std::size_t i = 0; i < y.size(); ++i) {
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (i != j) CHECK(y[i].squaredNorm() - y[i].dot(y[j]) >= 1.0);
    }
  }
  const auto s = build_soft_targets(y, 0.01);
  CHECK((s - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("soft target properties on random cohorts") {
  const auto schema = rich_schema();
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.index(64);
    std::vector<Vector> y;
    for (std::size_t i = 0; i < n; ++i) {
      Metadata record;
      for (const auto& a : schema.attributes()) record[a.name] = a.levels[rng.index(a.levels.size())];
      y.push_back(encode_metadata(record, schema));
    }
    for (double tau : {0.1, 0.5, 2.0}) {
      const auto s = build_soft_targets(y, tau);
      const auto ref = oracle::soft_targets(y, tau);
      CHECK((s - ref).cwiseAbs().maxCoeff() < 1e-12);
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        CHECK(std::abs(s.row(i).sum() - 1.0) < 1e-9);
        CHECK(s(i, i) >= s.row(i).maxCoeff() - 1e-15);
        CHECK(s.row(i).minCoeff() > 0.0);
      }
    }
    // Scaling every y changes s; the inner products scale quadratically.
    std::vector<Vector> scaled;
    for (const auto& v : y) scaled.push_back(2.0 * v);
    if (n > 1) {
      bool any_distinct = false;
      for (std::size_t j = 1; j < n; ++j) any_distinct |= y[0].dot(y[j]) != y[0].squaredNorm();
      if (any_distinct) {
        CHECK((build_soft_targets(scaled, 0.5) - build_soft_targets(y, 0.5)).cwiseAbs().maxCoeff() > 1e-9);
      }
    }
  }
}

TEST_CASE("upweighting disease dimensions changes the targets") {
  const auto weighted = color_size_schema(3.0);
  const auto flat = color_size_schema(1.0);
  const Metadata a{{"color", "red"}, {"size", "s"}}, b{{"color", "red"}, {"size", "l"}},
      c{{"color", "blue"}, {"size", "s"}};
  auto targets = [&](const MetadataSchema& s) {
    return build_soft_targets({encode_metadata(a, s), encode_metadata(b, s), encode_metadata(c, s)}, 0.5);
  };
  const auto s3 = targets(weighted);
  const auto s1 = targets(flat);
  CHECK((s3 - s1).cwiseAbs().maxCoeff() > 1e-3);
  // Sharing the disease attribute now counts more than sharing size.
  CHECK(s3(0, 1) > s3(0, 2));
  CHECK(s1(0, 1) == doctest::Approx(s1(0, 2)));
}

TEST_CASE("soft target errors") {
  CHECK_THROWS_AS(build_soft_targets({Vector::Ones(2)}, 0.0), DomainError);
  CHECK_THROWS_AS(build_soft_targets({}, 1.0), ShapeError);
  CHECK_THROWS_AS(build_soft_targets({Vector::Ones(2), Vector::Ones(3)}, 1.0), ShapeError);
}
