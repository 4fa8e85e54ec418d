//! Seeded synthetic Devanagari corpora for tests, demos and toy training runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Lang, QaRecord};

/// Question category; each fact sentence holds exactly one entity of each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Who,
    Where,
    What,
    When,
}

pub const SLOTS: [Slot; 4] = [Slot::Who, Slot::Where, Slot::What, Slot::When];

struct LangBank {
    people: &'static [&'static str],
    places: &'static [&'static str],
    things: &'static [&'static str],
    times: &'static [&'static str],
    facts: &'static [&'static str],
    fillers: &'static [&'static str],
    questions: [&'static str; 4],
}

const HI: LangBank = LangBank {
    people: &[
        "राम", "सीता", "मोहन", "गीता", "अमित", "प्रिया", "राम कुमार", "सुनीता देवी", "विकास", "अनीता",
        "राहुल शर्मा", "कविता",
    ],
    places: &[
        "दिल्ली", "मुंबई", "पुणे", "जयपुर", "नई दिल्ली", "भोपाल", "पटना", "लखनऊ", "वाराणसी", "कोलकाता",
    ],
    things: &[
        "किताब", "फल", "कपड़े", "मिठाई", "घड़ी", "साइकिल", "चाय", "दवाई", "फूल", "खिलौने",
    ],
    times: &[
        "सोमवार", "मंगलवार", "बुधवार", "गुरुवार", "शुक्रवार", "शनिवार", "रविवार", "पिछले महीने", "कल सुबह",
    ],
    facts: &[
        "{who} ने {when} {where} में {what} खरीदा।",
        "{when} {who} ने {where} में {what} खरीदा।",
        "{where} में {who} ने {when} {what} खरीदा।",
    ],
    fillers: &[
        "आज मौसम बहुत अच्छा था।",
        "बाजार में बहुत भीड़ थी।",
        "बच्चे पार्क में खेल रहे थे।",
        "सड़क पर गाड़ियाँ धीरे चल रही थीं।",
        "शाम को हल्की बारिश हुई।",
        "लोग त्योहार की तैयारी कर रहे थे।",
        "दुकानें जल्दी खुल गई थीं।",
        "गाँव में मेला लगा था।",
    ],
    questions: [
        "{what} किसने खरीदा?",
        "{who} ने {what} कहाँ खरीदा?",
        "{who} ने {where} में क्या खरीदा?",
        "{who} ने {what} कब खरीदा?",
    ],
};

const MR: LangBank = LangBank {
    people: &[
        "गणेश", "सुरेश", "माधुरी", "स्नेहा", "अजय पाटील", "रोहन", "पूजा", "संजय जोशी", "मीरा", "आकाश",
    ],
    places: &[
        "पुणे", "नाशिक", "नागपूर", "कोल्हापूर", "नवी मुंबई", "सातारा", "सोलापूर", "औरंगाबाद", "ठाणे",
    ],
    things: &[
        "पुस्तक", "फळे", "कपडे", "पेढे", "घड्याळ", "सायकल", "भाजी", "औषध", "फुले", "खेळणी",
    ],
    times: &[
        "सोमवारी", "मंगळवारी", "बुधवारी", "गुरुवारी", "शुक्रवारी", "शनिवारी", "रविवारी", "काल सकाळी",
    ],
    facts: &[
        "{who} ने {when} {where} येथे {what} विकत घेतले.",
        "{when} {who} ने {where} येथे {what} विकत घेतले.",
    ],
    fillers: &[
        "आज हवामान खूप छान होते.",
        "बाजारात खूप गर्दी होती.",
        "मुले बागेत खेळत होती.",
        "संध्याकाळी हलका पाऊस पडला.",
        "लोक सणाची तयारी करत होते.",
        "गावात जत्रा भरली होती.",
        "रस्त्यावर वाहने हळू चालत होती.",
    ],
    questions: [
        "{what} कोणी विकत घेतले?",
        "{who} ने {what} कुठे विकत घेतले?",
        "{who} ने {where} येथे काय विकत घेतले?",
        "{who} ने {what} केव्हा विकत घेतले?",
    ],
};

fn bank(lang: Lang) -> &'static LangBank {
    match lang {
        Lang::Mr => &MR,
        _ => &HI,
    }
}

fn slot_key(s: Slot) -> &'static str {
    match s {
        Slot::Who => "{who}",
        Slot::Where => "{where}",
        Slot::What => "{what}",
        Slot::When => "{when}",
    }
}

fn fill(template: &str, values: &[(Slot, &str)]) -> String {
    values
        .iter()
        .fold(template.to_string(), |acc, (s, v)| acc.replace(slot_key(*s), v))
}

/// Knobs for [`qa_corpus_with`].
#[derive(Debug, Clone)]
pub struct QaSynthConfig {
    pub n: usize,
    pub seed: u64,
    pub langs: Vec<Lang>,
    pub max_fillers_before: usize,
    pub max_fillers_after: usize,
}

impl Default for QaSynthConfig {
    fn default() -> Self {
        QaSynthConfig {
            n: 2000,
            seed: 0,
            langs: vec![Lang::Hi, Lang::Mr],
            max_fillers_before: 4,
            max_fillers_after: 2,
        }
    }
}

/// Extractive QA records: one fact sentence with a who/where/what/when entity
/// each, surrounded by filler sentences, and a question about one slot.
pub fn qa_corpus(n: usize, seed: u64) -> Vec<QaRecord> {
    qa_corpus_with(&QaSynthConfig {
        n,
        seed,
        ..QaSynthConfig::default()
    })
}

pub fn qa_corpus_with(cfg: &QaSynthConfig) -> Vec<QaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n)
        .map(|i| {
            let lang = cfg.langs[i % cfg.langs.len()];
            let b = bank(lang);
            let pick = |rng: &mut ChaCha8Rng, xs: &'static [&'static str]| *xs.choose(rng).expect("non-empty");
            let values = [
                (Slot::Who, pick(&mut rng, b.people)),
                (Slot::Where, pick(&mut rng, b.places)),
                (Slot::What, pick(&mut rng, b.things)),
                (Slot::When, pick(&mut rng, b.times)),
            ];
            let fact_template = pick(&mut rng, b.facts);
            let fact = fill(fact_template, &values);
            let slot_i = rng.gen_range(0..4);
            let (slot, answer) = values[slot_i];
            let question = fill(b.questions[slot_i], &values);
            let before = rng.gen_range(0..=cfg.max_fillers_before);
            let after = rng.gen_range(0..=cfg.max_fillers_after);
            let mut sentences: Vec<&str> = (0..before).map(|_| pick(&mut rng, b.fillers)).collect();
            let prefix = sentences.join(" ");
            sentences.push(&fact);
            sentences.extend((0..after).map(|_| pick(&mut rng, b.fillers)));
            let context = sentences.join(" ");
            let fact_at = if before == 0 { 0 } else { prefix.chars().count() + 1 };
            let at = fact_template.find(slot_key(slot)).expect("every fact names every slot");
            let answer_start = fact_at + fill(&fact_template[..at], &values).chars().count();
            QaRecord {
                id: format!("{lang}-{i:05}"),
                lang,
                context,
                question,
                answer: answer.to_string(),
                answer_start,
            }
        })
        .collect()
}

/// Words exercising conjuncts, nukta, candrabindu, anusvara, visarga and digits.
pub const WORD_POOL: &[&str] = &[
    "नमस्ते", "दुनिया", "क्षमा", "त्रिकोण", "ज्ञान", "श्रम", "ज़मीन", "फ़ोन", "चाँद", "हँसी", "संगीत", "अंत",
    "दुःख", "प्रातः", "कृषि", "हृदय", "ऋषि", "ॐ", "विद्यालय", "पुस्तकालय", "स्वतंत्रता", "राष्ट्र",
    "मराठी", "हिंदी", "भाषा", "प्रश्न", "उत्तर", "संदर्भ", "वाक्य", "शब्द", "अक्षर", "ळ", "बाळ", "शाळा",
    "पाणी", "झाड", "डोंगर", "नदी", "समुद्र", "आकाश", "सूर्य", "पृथ्वी", "गंगा", "यमुना", "कावेरी",
    "१२३", "२०२४", "७", "०", "।", "॥", "?", ",", "द्वार", "श्री", "स्त्री", "ट्रेन", "कॉलेज", "डॉक्टर",
    "ऑफ़िस", "ग्रंथ", "सत्य", "धर्म", "कर्म", "ऐतिहासिक", "औषधि", "ईश्वर", "ऊर्जा", "एकता", "आशा",
    "इच्छा", "उम्मीद", "क़लम", "ख़बर", "ग़ज़ल", "ड़", "ढ़", "य़", "पंख", "मंज़िल", "फ़िल्म",
];

fn random_words(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<&'static str> {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| *WORD_POOL.choose(rng).expect("non-empty")).collect()
}

/// Lines of space-separated pool words.
pub fn devanagari_lines(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_words(&mut rng, 1, 16).join(" ")).collect()
}

/// Records whose answer is a random run of whole words inside a random context.
pub fn random_span_records(n: usize, seed: u64) -> Vec<QaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let words = random_words(&mut rng, 3, 40);
            let len = rng.gen_range(1..=3.min(words.len()));
            let first = rng.gen_range(0..=words.len() - len);
            let answer = words[first..first + len].join(" ");
            let answer_start = words[..first].iter().map(|w| w.chars().count() + 1).sum();
            QaRecord {
                id: format!("span-{i:05}"),
                lang: if i % 2 == 0 { Lang::Hi } else { Lang::Mr },
                context: words.join(" "),
                question: random_words(&mut rng, 1, 6).join(" "),
                answer,
                answer_start,
            }
        })
        .collect()
}

/// A key-value recall sequence: `pairs` distinct keys each followed by a value,
/// then one of the keys again. `target` is the value that followed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecallSample {
    pub ids: Vec<usize>,
    pub target: usize,
}

/// Keys use ids `first_id..first_id + n_keys` and values the `n_values` ids after them.
pub fn kv_recall(n: usize, pairs: usize, n_keys: usize, n_values: usize, first_id: usize, seed: u64) -> Vec<RecallSample> {
    assert!(pairs >= 1 && pairs <= n_keys && n_values >= 1, "need 1 <= pairs <= n_keys and values");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<usize> = (first_id..first_id + n_keys).collect();
    (0..n)
        .map(|_| {
            let chosen: Vec<usize> = keys.choose_multiple(&mut rng, pairs).copied().collect();
            let mut ids = Vec::with_capacity(2 * pairs + 1);
            let mut values = Vec::with_capacity(pairs);
            for &k in &chosen {
                let v = first_id + n_keys + rng.gen_range(0..n_values);
                ids.extend([k, v]);
                values.push(v);
            }
            let q = rng.gen_range(0..pairs);
            ids.push(chosen[q]);
            RecallSample { ids, target: values[q] }
        })
        .collect()
}
