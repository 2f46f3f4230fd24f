#include <doctest.h>

#include <fstream>

#include "../support.hpp"
#include "latentsub/archive.hpp"
#include "latentsub/image_io.hpp"
#include "latentsub/toy_data.hpp"

using namespace latentsub;
using latentsub::testing::TempDir;

TEST_CASE("image batch validates range, shape and labels")
{
    CHECK_NOTHROW(ImageBatch(torch::rand({2, 3, 4, 4}), std::vector<std::int64_t>{0, 1}, 2));
    CHECK_THROWS_AS(ImageBatch(torch::full({1, 3, 4, 4}, 1.5)), InvalidArgument);
    CHECK_THROWS_AS(ImageBatch(torch::full({1, 3, 4, 4}, -0.1)), InvalidArgument);
    CHECK_THROWS_AS(ImageBatch(torch::rand({3, 4, 4})), ShapeMismatch);
    CHECK_THROWS_AS(ImageBatch(torch::rand({2, 3, 4, 4}), std::vector<std::int64_t>{0}), ShapeMismatch);
    CHECK_THROWS_AS(ImageBatch(torch::rand({1, 3, 4, 4}), std::vector<std::int64_t>{5}, 5), InvalidArgument);

    auto nan = torch::rand({1, 3, 4, 4});
    nan[0][0][0][0] = std::nan("");
    CHECK_THROWS_AS(ImageBatch(nan.clone()), InvalidArgument);
}

TEST_CASE("image batch slicing and concatenation keep labels aligned")
{
    ImageBatch b(torch::rand({4, 3, 2, 2}), std::vector<std::int64_t>{0, 1, 2, 3}, 4);
    const auto s = b.slice(1, 3);
    CHECK(s.size() == 2);
    CHECK(*s.labels() == std::vector<std::int64_t>{1, 2});
    const std::vector<std::int64_t> idx{3, 0};
    const auto sel = b.select(idx);
    CHECK(*sel.labels() == std::vector<std::int64_t>{3, 0});
    CHECK(torch::equal(sel.pixels()[0], b.pixels()[3]));
    const std::vector<ImageBatch> parts{s, sel};
    const auto all = ImageBatch::concat(parts);
    CHECK(all.size() == 4);
    CHECK(*all.labels() == std::vector<std::int64_t>{1, 2, 3, 0});
}

TEST_CASE("class space requires at least two unique names")
{
    CHECK_THROWS(ClassSpace({"only"}));
    CHECK_THROWS(ClassSpace({"a", "a"}));
    ClassSpace c({"cat", "dog"});
    CHECK(c.index_of("dog") == 1);
    CHECK(c.contains("cat"));
    CHECK_FALSE(c.contains("cow"));
}

TEST_CASE("oracle outputs enforce the probability contract")
{
    const auto o = OracleOutput::from_probabilities({0.2, 0.5, 0.3});
    CHECK(o.label() == 1);
    CHECK(o.mode() == OutputMode::Probability);
    CHECK(o.label_only().mode() == OutputMode::LabelOnly);
    CHECK_FALSE(o.label_only().probs().has_value());
    CHECK_THROWS(OracleOutput::from_probabilities({0.5, 0.6}));
    CHECK_THROWS(OracleOutput::from_probabilities({-0.1, 1.1}));
    // ties resolve to the lowest index
    CHECK(OracleOutput::from_probabilities({0.4, 0.4, 0.2}).label() == 0);
    const std::vector<double> v{1.0, 3.0, 3.0};
    CHECK(argmax_lowest(v) == 1);
}

TEST_CASE("derived seeds are stable and position dependent")
{
    CHECK(derive_seed(1, 2) == derive_seed(1, 2));
    CHECK(derive_seed(1, 2) != derive_seed(1, 3));
    CHECK(derive_seed(1, 2, 3) != derive_seed(1, 3, 2));
    CHECK(parse_output_mode(to_string(OutputMode::LabelOnly)) == OutputMode::LabelOnly);
    CHECK(parse_stage(to_string(Stage::Stage2)) == Stage::Stage2);
}

TEST_CASE("toy dataset is deterministic and class balanced")
{
    const ToyDatasetSpec one{10, 32, 1, 7};
    const auto a = generate_toy_dataset(one);
    const auto b = generate_toy_dataset(one);
    CHECK(torch::equal(a.pixels(), b.pixels()));

    const auto big = generate_toy_dataset({10, 32, 100, 7});
    CHECK(big.size() == 1000);
    std::vector<int> counts(10, 0);
    for (auto l : *big.labels())
        ++counts[static_cast<std::size_t>(l)];
    for (int c : counts)
        CHECK(c == 100);

    // row j of class c matches the per-class renderer
    const auto cls3 = render_toy_class(3, 10, 32, ToyStyle::Private, 2, 7);
    CHECK(torch::equal(cls3.pixels()[1], big.pixels()[13]));

    CHECK_THROWS(generate_toy_dataset({1, 32, 5, 0}));
    const auto names = toy_class_space(36).names();
    CHECK(std::set<std::string>(names.begin(), names.end()).size() == 36);
    CHECK(names[0] == "red-circle");
}

TEST_CASE("toy classes are separable by a small conv net")
{
    const auto data = generate_toy_dataset({10, 32, 100, 7});
    seed_torch(3);
    TargetNetSpec spec;
    TargetNet net(spec);
    torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(1e-3));
    const auto labels = torch::tensor(*data.labels(), torch::kInt64);
    for (int epoch = 0; epoch < 6; ++epoch) {
        net->train();
        for (std::int64_t b = 0; b < data.size(); b += 50) {
            const auto loss = torch::nn::functional::cross_entropy(net->forward(data.pixels().slice(0, b, b + 50)),
                                                                   labels.slice(0, b, b + 50));
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
    }
    CHECK(label_agreement(*net, data, *data.labels()) > 0.8);
}

TEST_CASE("image folders load with labels and reject empty classes")
{
    TempDir dir("folder");
    const ClassSpace classes({"red-circle", "green-square"});
    for (const auto& name : classes.names()) {
        std::filesystem::create_directories(dir / name);
        for (int i = 0; i < 3; ++i)
            write_png(torch::rand({3, 32, 32}), dir.path() / name / ("img" + std::to_string(i) + ".png"));
    }
    const auto batch = load_image_folder(dir.path(), classes, 32);
    CHECK(batch.size() == 6);
    CHECK(std::count(batch.labels()->begin(), batch.labels()->end(), 1) == 3);

    TempDir empty("folder_empty");
    std::filesystem::create_directories(empty / "red-circle");
    std::filesystem::create_directories(empty / "green-square");
    write_png(torch::rand({3, 32, 32}), empty.path() / "red-circle" / "a.png");
    try {
        load_image_folder(empty.path(), classes, 32);
        FAIL("expected an error for the empty class");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("green-square") != std::string::npos);
    }
}

TEST_CASE("PNG round trip")
{
    TempDir dir("png");
    write_png(torch::ones({3, 32, 32}), dir / "white.png");
    const auto img = read_png(dir / "white.png");
    CHECK(img.sizes() == torch::IntArrayRef({3, 32, 32}));
    CHECK(torch::equal(img, torch::ones({3, 32, 32})));

    const auto r = torch::rand({3, 8, 8});
    write_png(r, dir / "r.png");
    CHECK((read_png(dir / "r.png") - r).abs().max().item<float>() <= 0.5f / 255.0f + 1e-6f);
    CHECK_THROWS(read_png(dir / "missing.png"));
}

TEST_CASE("tensor archive round trip preserves dtype, shape and metadata")
{
    TempDir dir("archive");
    TensorArchive a;
    a.put("f", torch::rand({2, 3}));
    a.put("d", torch::rand({4}, torch::kFloat64));
    a.put("i", torch::arange(5, torch::kInt64));
    a.put("u", torch::arange(7, torch::kUInt8));
    a.meta() = {{"kind", "test"}, {"n", 3}};
    a.save(dir / "x");
    const auto b = TensorArchive::load(dir / "x.json");
    CHECK(b.names() == std::vector<std::string>{"f", "d", "i", "u"});
    for (const auto& n : a.names())
        CHECK(torch::equal(a.get(n), b.get(n)));
    CHECK(b.meta()["n"] == 3);
    CHECK(archive_stem("foo.bin") == std::filesystem::path("foo"));
    CHECK_THROWS(TensorArchive::load(dir / "nope"));

    ImageBatch batch(torch::rand({2, 3, 4, 4}), std::vector<std::int64_t>{1, 0}, 2);
    save_image_batch(batch, dir / "batch");
    const auto back = load_image_batch(dir / "batch");
    CHECK(torch::equal(back.pixels(), batch.pixels()));
    CHECK(*back.labels() == *batch.labels());
}
