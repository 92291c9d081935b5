#include <gtest/gtest.h>

#include "cdaseg/raster.hpp"
#include "test_util.hpp"

using namespace cdaseg;
using testutil::bytes_of;

TEST(ImageDecode, SinglePixelScalesBytes) {
    auto bytes = bytes_of("P6\n1 1\n255\n");
    bytes.insert(bytes.end(), {255, 0, 0});
    const Image img = decode_image(bytes);
    EXPECT_EQ(img.width, 1);
    EXPECT_EQ(img.height, 1);
    EXPECT_EQ(img.channels, 3);
    EXPECT_EQ(img.data, (std::vector<float>{1.0f, 0.0f, 0.0f}));
}

TEST(ImageDecode, Endpoints) {
    auto bytes = bytes_of("P6 2 1 255\n");
    bytes.insert(bytes.end(), {0, 0, 0, 255, 255, 255});
    EXPECT_EQ(decode_image(bytes).data, (std::vector<float>{0, 0, 0, 1, 1, 1}));
}

TEST(ImageDecode, HeaderComments) {
    auto bytes = bytes_of("P6\n# made by hand\n1 # width done\n1\n255\n");
    bytes.insert(bytes.end(), {0, 51, 102});
    const Image img = decode_image(bytes);
    EXPECT_FLOAT_EQ(img.data[1], 0.2f);
}

TEST(ImageDecode, ErrorsCarryOffsets) {
    try {
        decode_image(bytes_of("P6\n2 2\n65535\n"));
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 6u);  // start of the maxval token's leading whitespace
    }
    auto truncated = bytes_of("P6\n2 1\n255\n");
    truncated.insert(truncated.end(), {1, 2, 3, 4});
    EXPECT_THROW(decode_image(truncated), FormatError);
    EXPECT_THROW(decode_image(bytes_of("P6\n2")), FormatError);
    EXPECT_THROW(decode_image(bytes_of("P3\n1 1\n255\n0 0 0")), FormatError);
    try {
        decode_image(bytes_of("P6\n1 x\n255\n"));
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 5u);
    }
}

TEST(ImageRoundTrip, GridValuesSurviveP6) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Image img(1 + static_cast<int>(rng.index(9)), 1 + static_cast<int>(rng.index(9)), 3);
        for (auto& v : img.data) v = static_cast<float>(rng.index(256)) / 255.0f;
        EXPECT_EQ(decode_image(encode_image(img)), img);
    }
}

TEST(ImageRoundTrip, NonRgbUsesTensorFormat) {
    Rng rng(4);
    const Image img = testutil::random_image(rng, 5, 4, 7);
    const auto bytes = encode_image(img);
    ASSERT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CDAT");
    EXPECT_EQ(decode_image(bytes), img);
}

TEST(ImageEncode, HalfRoundsUp) {
    Image img(1, 1, 3, 0.5f);
    const auto bytes = encode_image(img);
    EXPECT_EQ(bytes.back(), 128);  // round(127.5) half up
    EXPECT_EQ(quantize_unit(0.0f), 0);
    EXPECT_EQ(quantize_unit(1.0f), 255);
}

TEST(ImageValidate, RejectsOutOfRange) {
    Image img(2, 2, 3, 0.5f);
    EXPECT_NO_THROW(img.validate());
    img.data[3] = 1.5f;
    EXPECT_THROW(img.validate(), ShapeError);
    img.data[3] = std::nanf("");
    EXPECT_THROW(img.validate(), ShapeError);
}

TEST(MaskDecode, IdentityAndVoid) {
    auto bytes = bytes_of("P5\n2 2\n255\n");
    bytes.insert(bytes.end(), {0, 0, 1, 2});
    EXPECT_EQ(decode_mask(bytes, 3).labels, (std::vector<std::uint8_t>{0, 0, 1, 2}));
    bytes.back() = 255;
    bytes[bytes.size() - 4] = 255;
    const auto m = decode_mask(bytes, 3);
    EXPECT_TRUE(LabelMask::is_void(m.at(0, 0)));
}

TEST(MaskDecode, LabelRangeErrorNamesPixel) {
    auto bytes = bytes_of("P5\n2 2\n255\n");
    bytes.insert(bytes.end(), {0, 0, 7, 1});
    try {
        decode_mask(bytes, 3);
        FAIL();
    } catch (const LabelRangeError& e) {
        EXPECT_EQ(e.row(), 1);
        EXPECT_EQ(e.col(), 0);
    }
}

TEST(MaskEncode, PayloadFollowsHeader) {
    LabelMask m(2, 1, 2);
    m.labels = {0, 1};
    const auto bytes = encode_mask(m);
    ASSERT_GE(bytes.size(), 2u);
    EXPECT_EQ(bytes[bytes.size() - 2], 0x00);
    EXPECT_EQ(bytes[bytes.size() - 1], 0x01);
    EXPECT_EQ(decode_mask(bytes, 2), m);
}

TEST(MaskOneHot, AtMostOneHotPerPixel) {
    Rng rng(5);
    const auto m = testutil::random_mask(rng, 9, 7, 4, 0.3);
    for (int r = 0; r < m.height; ++r)
        for (int c = 0; c < m.width; ++c) {
            float s = 0;
            for (int k = 0; k < 4; ++k) s += m.one_hot(r, c, k);
            EXPECT_EQ(s, LabelMask::is_void(m.at(r, c)) ? 0.0f : 1.0f);
        }
}

TEST(Tensor, ExactRoundTrip) {
    testutil::TempDir dir("tensor");
    const Tensor t({2}, {1.5f, -2.25f});
    save_tensor(t, dir.path() / "t.cdat");
    const Tensor back = load_tensor(dir.path() / "t.cdat");
    EXPECT_EQ(back.dims, t.dims);
    EXPECT_EQ(back.values, t.values);
}

TEST(Tensor, HeaderLayout) {
    const auto bytes = encode_tensor(Tensor({1, 2}, {0.0f, 1.0f}));
    ASSERT_EQ(bytes.size(), 6u + 8u + 8u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CDAT");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5], 2);
    EXPECT_EQ(bytes[10], 2);  // second dim, little endian
    float one;
    std::memcpy(&one, bytes.data() + 18, 4);
    EXPECT_EQ(one, 1.0f);
}

TEST(Tensor, MalformedInputs) {
    auto bytes = encode_tensor(Tensor({3}, {1, 2, 3}));
    auto truncated = bytes;
    truncated.pop_back();
    std::size_t off = 0;
    EXPECT_THROW(decode_tensor(truncated, off), FormatError);
    auto bad_version = bytes;
    bad_version[4] = 9;
    off = 0;
    try {
        decode_tensor(bad_version, off);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 4u);
    }
    testutil::TempDir dir("tensor_trailing");
    bytes.push_back(0);
    detail::write_file(dir.path() / "x.cdat", bytes);
    EXPECT_THROW(load_tensor(dir.path() / "x.cdat"), FormatError);
}

TEST(Io, MissingFileNamesPath) {
    try {
        load_image("/nonexistent/dir/img.ppm");
        FAIL();
    } catch (const IoError& e) {
        EXPECT_EQ(e.path(), "/nonexistent/dir/img.ppm");
    }
}

TEST(Dataset, SaveLoadRoundTrip) {
    testutil::TempDir dir("dataset");
    Rng rng(6);
    Dataset ds;
    ds.num_classes = 4;
    for (int i = 0; i < 3; ++i) {
        Image img(6, 5, 3);
        for (auto& v : img.data) v = static_cast<float>(rng.index(256)) / 255.0f;
        DatasetItem it{"item" + std::to_string(i), img, std::nullopt};
        if (i != 1) it.mask = testutil::random_mask(rng, 6, 5, 4);
        ds.items.push_back(it);
    }
    save_dataset(ds, dir.path(), "split");
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "split" / "img_00000.ppm"));
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "split" / "lab_00002.pgm"));
    const auto back = load_dataset(dir.path(), "split", 4, Domain::Target);
    ASSERT_EQ(back.size(), 3u);
    EXPECT_FALSE(back.fully_labeled());
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(back.items[i].id, ds.items[i].id);
        EXPECT_EQ(back.items[i].image, ds.items[i].image);
        EXPECT_EQ(back.items[i].mask, ds.items[i].mask);
    }
    EXPECT_THROW(load_dataset(dir.path(), "split", 4, Domain::Target, true), IoError);
}
