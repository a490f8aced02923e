//! A generated intent dataset in the shape of SNIPS: seven intents, each
//! rendered from a handful of sentence templates with shared slot values, so
//! surface words overlap across classes and the task is not a keyword lookup.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_lm::{pretrain_mlm, BaseConfig, BaseLM, PretrainConfig};
use crate::error::Result;
use crate::task_data::{verbalize, Dataset, LabeledExample};

pub const TOY_CLASSES: [&str; 7] = [
    "add_to_playlist",
    "book_restaurant",
    "get_weather",
    "play_music",
    "rate_book",
    "search_creative_work",
    "search_screening_event",
];

const ARTIST: &[&str] = &["adele", "miles davis", "the beatles", "nina simone", "daft punk", "bob marley"];
const SONG: &[&str] = &["blue in green", "yesterday", "one more time", "feeling good", "hello", "redemption song"];
const PLAYLIST: &[&str] = &["road trip", "morning mix", "workout", "chill evening", "party hits", "study time"];
const GENRE: &[&str] = &["jazz", "rock", "soul", "reggae", "pop", "house"];
const CITY: &[&str] = &["paris", "boston", "tokyo", "denver", "lagos", "oslo"];
const TIME: &[&str] = &["tomorrow", "tonight", "on friday", "this weekend", "next week", "at noon"];
const PARTY: &[&str] = &["two", "four", "six", "three", "five", "eight"];
const CUISINE: &[&str] = &["italian", "thai", "mexican", "sushi", "indian", "greek"];
// titles shared by books, films and songs on purpose
const TITLE: &[&str] = &["the dark tower", "little women", "dune", "the road", "blue in green", "moonlight"];
const RATING: &[&str] = &["one", "two", "three", "four", "five", "zero"];
const KIND: &[&str] = &["book", "novel", "film", "movie", "album", "song"];
const FILLER: &[&str] = &["", "please", "can you", "i want to", "could you", "hey"];

fn templates(class: &str) -> &'static [&'static str] {
    match class {
        "add_to_playlist" => &[
            "add {song} to my {playlist} playlist",
            "put {artist} on the {playlist} list",
            "add this {genre} track to {playlist}",
            "include {song} by {artist} in my playlist",
            "save {song} to the {playlist} playlist",
        ],
        "book_restaurant" => &[
            "book a table for {party} at a {cuisine} place {time}",
            "reserve a {cuisine} restaurant in {city} {time}",
            "get me a table for {party} people {time}",
            "book a {cuisine} dinner for {party} in {city}",
            "make a reservation at a {cuisine} restaurant {time}",
        ],
        "get_weather" => &[
            "what is the weather in {city} {time}",
            "will it rain in {city} {time}",
            "how cold will it be {time} in {city}",
            "is it going to be sunny in {city}",
            "tell me the forecast for {city} {time}",
        ],
        "play_music" => &[
            "play {song} by {artist}",
            "play some {genre} music",
            "i want to hear {artist} {time}",
            "start playing {genre} from {artist}",
            "put on {song}",
        ],
        "rate_book" => &[
            "rate {title} {rating} stars",
            "give the book {title} {rating} out of five",
            "i would rate this novel {rating} points",
            "rate the current {kind} {rating} stars",
            "give {title} a rating of {rating}",
        ],
        "search_creative_work" => &[
            "find the {kind} called {title}",
            "search for {title}",
            "look up the {kind} {title}",
            "i am looking for a {kind} named {title}",
            "show me the {kind} {title} by {artist}",
        ],
        "search_screening_event" => &[
            "what movies are showing in {city} {time}",
            "find showtimes for {title} {time}",
            "when is {title} playing at the cinema",
            "is {title} showing in {city} {time}",
            "find a movie theater in {city} showing {title}",
        ],
        _ => &[],
    }
}

fn slot_values(slot: &str) -> &'static [&'static str] {
    match slot {
        "artist" => ARTIST,
        "song" => SONG,
        "playlist" => PLAYLIST,
        "genre" => GENRE,
        "city" => CITY,
        "time" => TIME,
        "party" => PARTY,
        "cuisine" => CUISINE,
        "title" => TITLE,
        "rating" => RATING,
        "kind" => KIND,
        _ => &[""],
    }
}

/// Renders one random sentence for `class`.
pub fn render<R: Rng>(class: &str, rng: &mut R) -> String {
    let template = *templates(class).choose(rng).unwrap_or(&"");
    let mut out = String::new();
    let filler = *FILLER.choose(rng).unwrap_or(&"");
    if !filler.is_empty() {
        out.push_str(filler);
        out.push(' ');
    }
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..].find('}').map_or(rest.len(), |c| open + c);
        let slot = &rest[open + 1..close];
        out.push_str(slot_values(slot).choose(rng).unwrap_or(&""));
        rest = &rest[(close + 1).min(rest.len())..];
    }
    out.push_str(rest);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            train_per_class: 100,
            test_per_class: 30,
            seed: 0,
        }
    }
}

/// Generates the labeled dataset; classes are in [`TOY_CLASSES`] order.
pub fn toy_dataset(cfg: &ToyConfig) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen = |n: usize| -> Vec<LabeledExample> {
        let mut v = Vec::with_capacity(n * TOY_CLASSES.len());
        for _ in 0..n {
            for c in TOY_CLASSES {
                v.push(LabeledExample::new(render(c, &mut rng), c));
            }
        }
        v
    };
    let train = gen(cfg.train_per_class);
    let test = gen(cfg.test_per_class);
    Dataset {
        name: "toy-intents".into(),
        classes: TOY_CLASSES.iter().map(|s| s.to_string()).collect(),
        train,
        test,
    }
}

/// Unlabeled sentences from the same distribution, plus the verbalized class
/// names so the label words are in the vocabulary.
pub fn toy_corpus(n_sentences: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let mut out: Vec<String> = TOY_CLASSES.iter().map(|c| verbalize(c)).collect();
    for i in 0..n_sentences {
        out.push(render(TOY_CLASSES[i % TOY_CLASSES.len()], &mut rng));
    }
    out
}

/// Settings for a small base that pretrains in well under a minute.
pub fn toy_pretrain_config(seed: u64) -> PretrainConfig {
    PretrainConfig {
        model: BaseConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff_base: 64,
            max_seq_len: 32,
            dropout_p: 0.1,
        },
        epochs: 8,
        seed,
        ..PretrainConfig::default()
    }
}

/// Pretrains and freezes a base on [`toy_corpus`].
pub fn toy_base(n_sentences: usize, cfg: &PretrainConfig) -> Result<BaseLM> {
    let (base, _) = pretrain_mlm(&toy_corpus(n_sentences, cfg.seed), cfg)?;
    Ok(base.freeze())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_shape_and_determinism() {
        let cfg = ToyConfig::default();
        let ds = toy_dataset(&cfg);
        assert_eq!(ds.classes.len(), 7);
        assert_eq!(ds.train.len(), 700);
        assert_eq!(ds.test.len(), 210);
        ds.validate().unwrap();
        assert_eq!(ds, toy_dataset(&cfg));
        assert_ne!(ds, toy_dataset(&ToyConfig { seed: 1, ..cfg }));
    }

    #[test]
    fn templates_fill_every_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in TOY_CLASSES {
            assert!(!templates(c).is_empty());
            for _ in 0..50 {
                let s = render(c, &mut rng);
                assert!(!s.contains('{') && !s.contains('}'), "{s}");
                assert!(!s.is_empty());
            }
        }
    }
}
