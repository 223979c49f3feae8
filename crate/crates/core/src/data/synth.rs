//! Synthetic restaurant-reservation corpora with profile-dependent bot style,
//! option ranking and contact preference.
//!
//! Tasks: 1 issue an API call, 2 update it, 3 propose options from KB facts,
//! 4 answer information requests, 5 the full dialog.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Dialog, Entry, Split};
use crate::encoding::{Profile, ProfileSchema};
use crate::error::{Error, Result};
use crate::kb::{KbFact, KnowledgeBase};
use crate::numerics::SeedRng;

pub const KB_COLUMNS: [&str; 3] = ["phone", "social_media", "address"];
const PEOPLE: [&str; 4] = ["two", "four", "six", "eight"];
const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];
const SILENCE: &str = "<SILENCE>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub key: String,
    pub values: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// highest rating first
    Rating,
    /// closest first
    Distance,
}

/// How one profile attribute drives contact answers and option order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceRule {
    pub attribute: String,
    /// attribute value → KB column returned for a contact request
    pub contact: BTreeMap<String, String>,
    pub default_contact: String,
    /// attribute value → option ranking
    pub ranking: BTreeMap<String, Ranking>,
    pub default_ranking: Ranking,
}

impl Default for PreferenceRule {
    fn default() -> Self {
        PreferenceRule {
            attribute: "age".into(),
            contact: BTreeMap::from([
                ("young".to_string(), "social_media".to_string()),
                ("middle-aged".to_string(), "phone".to_string()),
                ("elderly".to_string(), "phone".to_string()),
            ]),
            default_contact: "phone".into(),
            ranking: BTreeMap::from([("young".to_string(), Ranking::Rating)]),
            default_ranking: Ranking::Distance,
        }
    }
}

impl PreferenceRule {
    pub fn contact_column(&self, profile: &Profile) -> &str {
        profile
            .get(&self.attribute)
            .and_then(|v| self.contact.get(v))
            .unwrap_or(&self.default_contact)
    }

    pub fn ranking(&self, profile: &Profile) -> Ranking {
        profile
            .get(&self.attribute)
            .and_then(|v| self.ranking.get(v))
            .copied()
            .unwrap_or(self.default_ranking)
    }

    /// Columns a contact request can resolve to.
    pub fn ambiguous_columns(&self) -> BTreeSet<String> {
        self.contact
            .values()
            .cloned()
            .chain([self.default_contact.clone()])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub tasks: Vec<u8>,
    /// dialogs per task and split
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// total dialogs per task, split 70/15/15; overrides train/dev/test
    pub dialogs: Option<usize>,
    pub attributes: Vec<AttributeSpec>,
    pub cuisines: Vec<String>,
    pub locations: Vec<String>,
    pub restaurants_per_combo: usize,
    /// options listed after an API call (at most `restaurants_per_combo`)
    pub options_per_search: usize,
    pub preference: PreferenceRule,
    /// profile-dependent bot wording; information-task dialogs are never styled
    pub styled: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        GeneratorConfig {
            seed: 0,
            tasks: vec![1, 2, 3, 4, 5],
            train: 100,
            dev: 20,
            test: 20,
            dialogs: None,
            attributes: vec![
                AttributeSpec {
                    key: "gender".into(),
                    values: strings(&["male", "female"]),
                },
                AttributeSpec {
                    key: "age".into(),
                    values: strings(&["young", "middle-aged", "elderly"]),
                },
            ],
            cuisines: strings(&["italian", "french", "indian", "spanish"]),
            locations: strings(&["rome", "paris", "london", "madrid"]),
            restaurants_per_combo: 3,
            options_per_search: 3,
            preference: PreferenceRule::default(),
            styled: true,
        }
    }
}

impl GeneratorConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("generator config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("generator config serializes")
    }

    pub fn split_sizes(&self) -> [(Split, usize); 3] {
        match self.dialogs {
            Some(n) => {
                let train = (n as f64 * 0.7).round() as usize;
                let dev = (n as f64 * 0.15).round() as usize;
                [
                    (Split::Train, train),
                    (Split::Dev, dev),
                    (Split::Test, n.saturating_sub(train + dev)),
                ]
            }
            None => [
                (Split::Train, self.train),
                (Split::Dev, self.dev),
                (Split::Test, self.test),
            ],
        }
    }

    pub fn schema(&self) -> Result<ProfileSchema> {
        ProfileSchema::new(
            self.attributes
                .iter()
                .map(|a| (a.key.clone(), a.values.clone()))
                .collect(),
        )
    }

    fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.tasks.iter().any(|t| !(1..=5).contains(t)) {
            return Err(Error::invalid("tasks must be a non-empty subset of 1..=5"));
        }
        if self.cuisines.is_empty() || self.locations.is_empty() || self.restaurants_per_combo == 0
        {
            return Err(Error::invalid(
                "need at least one cuisine, location and restaurant",
            ));
        }
        if self.options_per_search == 0 {
            return Err(Error::invalid("options_per_search must be at least 1"));
        }
        for col in self.preference.ambiguous_columns() {
            if !KB_COLUMNS.contains(&col.as_str()) {
                return Err(Error::invalid(format!(
                    "preference column {col:?} is not one of {KB_COLUMNS:?}"
                )));
            }
        }
        for words in [&self.cuisines, &self.locations] {
            if words.iter().any(|w| w.split_whitespace().count() != 1) {
                return Err(Error::invalid(
                    "cuisines and locations must be single tokens",
                ));
            }
        }
        Ok(())
    }
}

/// Profile-dependent wording: formality register and form of address.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Style {
    register: usize,
    appellation: Option<String>,
}

impl Style {
    fn plain() -> Self {
        Style {
            register: 1,
            appellation: None,
        }
    }

    fn for_profile(profile: &Profile, schema: &ProfileSchema) -> Self {
        let register = match profile.get("age").map(String::as_str) {
            None => 1,
            Some("young") => 0,
            Some("middle-aged") => 1,
            Some("elderly") => 2,
            Some(v) => {
                schema
                    .attributes()
                    .iter()
                    .find(|(k, _)| k == "age")
                    .and_then(|(_, vals)| vals.iter().position(|x| x == v))
                    .unwrap_or(1)
                    % 3
            }
        };
        let appellation = profile.get("gender").map(|g| match g.as_str() {
            "male" => "sir".to_string(),
            "female" => "madam".to_string(),
            other => other.to_string(),
        });
        Style {
            register,
            appellation,
        }
    }

    fn say(&self, kind: Say) -> String {
        let variants: [&str; 3] = match kind {
            Say::Greet => [
                "hey {a} what's up what can i do for you",
                "hello {a} what can i help you with today",
                "good day {a} how may i be of assistance to you today",
            ],
            Say::OnIt => [
                "on it {a}",
                "i'm on it {a}",
                "very well {a} i shall take care of it",
            ],
            Say::Ask(Field::Cuisine) => [
                "{a} what food are you in the mood for",
                "any preference on a type of cuisine {a}",
                "{a} may i ask which cuisine you would prefer",
            ],
            Say::Ask(Field::Location) => [
                "{a} where do you wanna eat",
                "where should it be {a}",
                "{a} may i ask where the restaurant should be located",
            ],
            Say::Ask(Field::People) => [
                "how many of you {a}",
                "how many people would be in your party {a}",
                "{a} may i know how many guests will be joining you",
            ],
            Say::Ask(Field::Price) => [
                "{a} what's your budget",
                "which price range are you looking for {a}",
                "{a} may i inquire about your preferred price range",
            ],
            Say::Looking => [
                "ok {a} lemme look into some options",
                "ok let me look into some options for you {a}",
                "thank you {a} allow me to look into some options for you",
            ],
            Say::UpdateMore => [
                "sure {a} anything else to change",
                "sure {a} is there anything else to update",
                "certainly {a} would you like to update anything else",
            ],
            Say::Propose => [
                "{a} how about this one: {item}",
                "what do you think of this option: {item} {a}",
                "{a} may i suggest the following: {item}",
            ],
            Say::Reserve => [
                "cool {a} booking it now",
                "great {a} let me do the reservation",
                "excellent {a} i shall make the reservation right away",
            ],
            Say::Bye => [
                "bye {a} enjoy",
                "you're welcome {a}",
                "it was a pleasure to assist you {a}",
            ],
        };
        let a = self.appellation.as_deref().unwrap_or("");
        variants[self.register]
            .replace("{a}", a)
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn propose(&self, item: &str) -> String {
        self.say(Say::Propose).replace("{item}", item)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Field {
    Cuisine,
    Location,
    People,
    Price,
}

const FIELDS: [Field; 4] = [Field::Cuisine, Field::Location, Field::People, Field::Price];

#[derive(Clone, Copy, Debug)]
enum Say {
    Greet,
    OnIt,
    Ask(Field),
    Looking,
    UpdateMore,
    Propose,
    Reserve,
    Bye,
}

#[derive(Clone, Debug)]
struct Slots {
    cuisine: String,
    location: String,
    people: String,
    price: String,
}

impl Slots {
    fn value(&self, f: Field) -> &str {
        match f {
            Field::Cuisine => &self.cuisine,
            Field::Location => &self.location,
            Field::People => &self.people,
            Field::Price => &self.price,
        }
    }

    fn api_call(&self) -> String {
        format!(
            "api_call {} {} {} {}",
            self.cuisine, self.location, self.people, self.price
        )
    }
}

struct Restaurant {
    name: String,
    cuisine: String,
    location: String,
    rating: u32,
}

struct World<'c> {
    cfg: &'c GeneratorConfig,
    schema: ProfileSchema,
    profiles: Vec<Profile>,
    restaurants: Vec<Restaurant>,
    kb: KnowledgeBase,
}

fn pick<'a, T>(rng: &mut SeedRng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("non-empty choice")
}

impl<'c> World<'c> {
    fn new(cfg: &'c GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let schema = cfg.schema()?;
        let profiles = schema.all_profiles();
        let mut rng = SeedRng::new(cfg.seed).fork(u64::MAX);
        let mut restaurants = Vec::new();
        let mut facts = Vec::new();
        for location in &cfg.locations {
            for cuisine in &cfg.cuisines {
                let mut ratings: Vec<u32> = (1..=8).collect();
                ratings.shuffle(&mut rng);
                for n in 0..cfg.restaurants_per_combo {
                    let name = format!("resto_{location}_{cuisine}_{}", n + 1);
                    for col in KB_COLUMNS {
                        facts.push(KbFact::new(&name, col, &format!("{name}_{col}")));
                    }
                    restaurants.push(Restaurant {
                        name,
                        cuisine: cuisine.clone(),
                        location: location.clone(),
                        rating: ratings[n % ratings.len()],
                    });
                }
            }
        }
        let kb = KnowledgeBase::load(&facts)?;
        Ok(World {
            cfg,
            schema,
            profiles,
            restaurants,
            kb,
        })
    }

    fn style(&self, profile: &Profile) -> Style {
        if self.cfg.styled {
            Style::for_profile(profile, &self.schema)
        } else {
            Style::plain()
        }
    }

    fn random_slots(&self, rng: &mut SeedRng) -> Slots {
        Slots {
            cuisine: pick(rng, &self.cfg.cuisines).clone(),
            location: pick(rng, &self.cfg.locations).clone(),
            people: pick(rng, &PEOPLE).to_string(),
            price: pick(rng, &PRICES).to_string(),
        }
    }

    /// A profile whose contact column differs from `profile`'s.
    fn contrasting_profile(&self, profile: &Profile, rng: &mut SeedRng) -> Profile {
        let rule = &self.cfg.preference;
        let own = rule.contact_column(profile);
        let options: Vec<Profile> = self
            .schema
            .attributes()
            .iter()
            .filter(|(k, _)| k == &rule.attribute)
            .flat_map(|(k, values)| {
                values.iter().map(move |v| {
                    let mut p = profile.clone();
                    p.insert(k.clone(), v.clone());
                    p
                })
            })
            .filter(|p| rule.contact_column(p) != own)
            .collect();
        if options.is_empty() {
            pick(rng, &self.profiles).clone()
        } else {
            pick(rng, &options).clone()
        }
    }

    /// Greeting, request and slot filling up to the API call.
    fn api_call_phase(
        &self,
        style: &Style,
        slots: &Slots,
        all_given: bool,
        rng: &mut SeedRng,
    ) -> Vec<Entry> {
        let mut out = Vec::new();
        let ex = |u: String, b: String| Entry::Exchange { user: u, bot: b };
        out.push(ex(
            pick(rng, &["hi", "hello", "good morning"]).to_string(),
            style.say(Say::Greet),
        ));
        let given: Vec<bool> = FIELDS
            .iter()
            .map(|_| all_given || rng.gen_bool(0.5))
            .collect();
        let mut request = pick(
            rng,
            &[
                "can you make a restaurant reservation",
                "i'd like to book a table",
                "may i have a table",
            ],
        )
        .to_string();
        for (f, g) in FIELDS.iter().zip(&given) {
            if *g {
                request.push_str(&match f {
                    Field::Cuisine => format!(" with {} food", slots.cuisine),
                    Field::Location => format!(" in {}", slots.location),
                    Field::People => format!(" for {} people", slots.people),
                    Field::Price => format!(" in a {} price range", slots.price),
                });
            }
        }
        out.push(ex(request, style.say(Say::OnIt)));
        let missing: Vec<Field> = FIELDS
            .iter()
            .zip(&given)
            .filter(|(_, g)| !**g)
            .map(|(f, _)| *f)
            .collect();
        let next = |i: usize| match missing.get(i) {
            Some(f) => style.say(Say::Ask(*f)),
            None => style.say(Say::Looking),
        };
        out.push(ex(SILENCE.into(), next(0)));
        for (i, f) in missing.iter().enumerate() {
            let answer = match f {
                Field::Cuisine => format!("{} food please", slots.cuisine),
                Field::Location => format!("in {}", slots.location),
                Field::People => format!("we will be {}", slots.people),
                Field::Price => format!("in a {} price range please", slots.price),
            };
            out.push(ex(answer, next(i + 1)));
        }
        out.push(ex(SILENCE.into(), slots.api_call()));
        out
    }

    /// One or two slot changes followed by the corrected API call.
    fn update_phase(&self, style: &Style, slots: &mut Slots, rng: &mut SeedRng) -> Vec<Entry> {
        let mut out = Vec::new();
        let updates = rng.gen_range(1..=2);
        for _ in 0..updates {
            let field = *pick(rng, &FIELDS);
            let fresh = self.random_slots(rng);
            let value = if fresh.value(field) != slots.value(field) {
                fresh.value(field).to_string()
            } else {
                // pick any other value deterministically
                let pool: Vec<String> = match field {
                    Field::Cuisine => self.cfg.cuisines.clone(),
                    Field::Location => self.cfg.locations.clone(),
                    Field::People => PEOPLE.iter().map(|s| s.to_string()).collect(),
                    Field::Price => PRICES.iter().map(|s| s.to_string()).collect(),
                };
                pool.into_iter()
                    .find(|v| v != slots.value(field))
                    .unwrap_or_else(|| slots.value(field).to_string())
            };
            let user = match field {
                Field::Cuisine => format!("instead could it be with {value} food"),
                Field::Location => format!("actually i would prefer in {value}"),
                Field::People => format!("instead could it be for {value} people"),
                Field::Price => format!("actually i would prefer a {value} price range"),
            };
            match field {
                Field::Cuisine => slots.cuisine = value,
                Field::Location => slots.location = value,
                Field::People => slots.people = value,
                Field::Price => slots.price = value,
            }
            out.push(Entry::Exchange {
                user,
                bot: style.say(Say::UpdateMore),
            });
        }
        out.push(Entry::Exchange {
            user: pick(rng, &["no", "no thanks"]).to_string(),
            bot: style.say(Say::Looking),
        });
        out.push(Entry::Exchange {
            user: SILENCE.into(),
            bot: slots.api_call(),
        });
        out
    }

    /// KB facts of the matching restaurants, proposals in profile order until
    /// one is accepted. Returns the entries and the accepted restaurant.
    fn options_phase(
        &self,
        profile: &Profile,
        style: &Style,
        slots: &Slots,
        rng: &mut SeedRng,
    ) -> (Vec<Entry>, usize) {
        let mut matching: Vec<usize> = (0..self.restaurants.len())
            .filter(|&i| {
                self.restaurants[i].cuisine == slots.cuisine
                    && self.restaurants[i].location == slots.location
            })
            .collect();
        matching.shuffle(rng);
        matching.truncate(self.cfg.options_per_search);
        let mut distances: Vec<u32> = (1..=9).collect();
        distances.shuffle(rng);

        let mut out = Vec::new();
        for (n, &i) in matching.iter().enumerate() {
            let r = &self.restaurants[i];
            out.extend(self.kb.facts_of(i).into_iter().map(Entry::Fact));
            out.push(Entry::Fact(KbFact::new(
                &r.name,
                "rating",
                &r.rating.to_string(),
            )));
            out.push(Entry::Fact(KbFact::new(
                &r.name,
                "distance",
                &format!("{}km", distances[n]),
            )));
        }
        let mut order: Vec<(usize, u32)> = matching
            .iter()
            .enumerate()
            .map(|(n, &i)| (i, distances[n]))
            .collect();
        match self.cfg.preference.ranking(profile) {
            Ranking::Rating => {
                order.sort_by_key(|&(i, _)| std::cmp::Reverse(self.restaurants[i].rating))
            }
            Ranking::Distance => order.sort_by_key(|&(_, dist)| dist),
        }
        let accept_at = rng.gen_range(0..order.len());
        let mut user = SILENCE.to_string();
        for (i, _) in &order[..accept_at] {
            out.push(Entry::Exchange {
                user,
                bot: style.propose(&self.restaurants[*i].name),
            });
            user = pick(
                rng,
                &["no this does not work for me", "do you have something else"],
            )
            .to_string();
        }
        let chosen = order[accept_at].0;
        out.push(Entry::Exchange {
            user,
            bot: style.propose(&self.restaurants[chosen].name),
        });
        out.push(Entry::Exchange {
            user: pick(rng, &["let's do it", "that looks great"]).to_string(),
            bot: style.say(Say::Reserve),
        });
        (out, chosen)
    }

    /// Information requests about `item`; the contact column depends on the
    /// profile, the address never does.
    fn info_requests(&self, rng: &mut SeedRng) -> Vec<InfoAsk> {
        let mut asks = vec![InfoAsk::Contact(rng.gen_range(0..2))];
        if rng.gen_bool(0.5) {
            asks.push(InfoAsk::Address(rng.gen_range(0..2)));
        }
        asks.shuffle(rng);
        asks
    }

    fn render_info(&self, profile: &Profile, item: usize, asks: &[InfoAsk]) -> Vec<Entry> {
        let column = |name: &str| {
            KB_COLUMNS
                .iter()
                .position(|c| *c == name)
                .expect("known column")
        };
        asks.iter()
            .map(|ask| {
                let (user, col) = match ask {
                    InfoAsk::Contact(v) => (
                        [
                            "may i have the contact information of the restaurant",
                            "how can i contact the restaurant",
                        ][*v],
                        column(self.cfg.preference.contact_column(profile)),
                    ),
                    InfoAsk::Address(v) => (
                        [
                            "what is the address of the restaurant",
                            "where is the restaurant located",
                        ][*v],
                        column("address"),
                    ),
                };
                Entry::Exchange {
                    user: user.to_string(),
                    bot: answer(self.kb.entity(item, col)),
                }
            })
            .collect()
    }

    fn closing(&self, style: &Style, rng: &mut SeedRng) -> Entry {
        Entry::Exchange {
            user: pick(rng, &["thank you", "thanks"]).to_string(),
            bot: style.say(Say::Bye),
        }
    }

    fn dialog(&self, task: u8, profile: Profile, rng: &mut SeedRng) -> Dialog {
        let style = self.style(&profile);
        let mut slots = self.random_slots(rng);
        let mut entries = Vec::new();
        match task {
            1 => entries.extend(self.api_call_phase(&style, &slots, false, rng)),
            2 => {
                entries.extend(self.api_call_phase(&style, &slots, false, rng));
                entries.extend(self.update_phase(&style, &mut slots, rng));
            }
            3 => {
                entries.extend(self.api_call_phase(&style, &slots, true, rng));
                entries.extend(self.options_phase(&profile, &style, &slots, rng).0);
            }
            5 => {
                entries.extend(self.api_call_phase(&style, &slots, false, rng));
                if rng.gen_bool(0.5) {
                    entries.extend(self.update_phase(&style, &mut slots, rng));
                }
                let (opts, chosen) = self.options_phase(&profile, &style, &slots, rng);
                entries.extend(opts);
                let asks = self.info_requests(rng);
                entries.extend(self.render_info(&profile, chosen, &asks));
                entries.push(self.closing(&style, rng));
            }
            _ => unreachable!("information dialogs are generated in pairs"),
        }
        Dialog {
            id: 0,
            task_id: task,
            profile,
            entries,
        }
    }

    /// Two unstyled information dialogs with identical content whose
    /// profiles prefer different contact columns.
    fn info_pair(&self, profile: Profile, rng: &mut SeedRng) -> [Dialog; 2] {
        let twin = self.contrasting_profile(&profile, rng);
        let item = rng.gen_range(0..self.restaurants.len());
        let greeting = pick(rng, &["hi", "hello", "good morning"]).to_string();
        let asks = self.info_requests(rng);
        let thanks = pick(rng, &["thank you", "thanks"]).to_string();
        let plain = Style::plain();
        let render = |p: Profile| {
            let mut entries: Vec<Entry> = self
                .kb
                .facts_of(item)
                .into_iter()
                .map(Entry::Fact)
                .collect();
            entries.push(Entry::Exchange {
                user: greeting.clone(),
                bot: plain.say(Say::Greet),
            });
            entries.push(Entry::Exchange {
                user: format!(
                    "can you make a restaurant reservation at {}",
                    self.restaurants[item].name
                ),
                bot: plain.say(Say::Reserve),
            });
            entries.extend(self.render_info(&p, item, &asks));
            entries.push(Entry::Exchange {
                user: thanks.clone(),
                bot: plain.say(Say::Bye),
            });
            Dialog {
                id: 0,
                task_id: 4,
                profile: p,
                entries,
            }
        };
        [render(profile), render(twin)]
    }
}

#[derive(Clone, Copy, Debug)]
enum InfoAsk {
    Contact(usize),
    Address(usize),
}

fn answer(entity: &str) -> String {
    format!("here is the information: {entity}")
}

/// Generates the corpus described by `cfg`. The same configuration always
/// yields the same corpus.
pub fn generate(cfg: &GeneratorConfig) -> Result<Corpus> {
    let world = World::new(cfg)?;
    let tasks: BTreeSet<u8> = cfg.tasks.iter().copied().collect();
    let base = SeedRng::new(cfg.seed);
    let mut splits: BTreeMap<Split, Vec<Dialog>> = BTreeMap::new();
    for (split, n) in cfg.split_sizes() {
        for &task in &tasks {
            let mut rng = base.fork(task as u64 * 16 + split as u64);
            let mut dialogs = Vec::with_capacity(n);
            while dialogs.len() < n {
                let profile = pick(&mut rng, &world.profiles).clone();
                if task == 4 {
                    let [a, b] = world.info_pair(profile, &mut rng);
                    dialogs.push(a);
                    if dialogs.len() < n {
                        dialogs.push(b);
                    }
                } else {
                    dialogs.push(world.dialog(task, profile, &mut rng));
                }
            }
            splits.entry(split).or_default().extend(dialogs);
        }
    }
    let mut next_id = 0;
    for split in Split::ALL {
        for d in splits.entry(split).or_default() {
            d.id = next_id;
            next_id += 1;
        }
    }

    let mut candidates: BTreeSet<String> = BTreeSet::new();
    let mut groups: BTreeMap<String, Option<String>> = BTreeMap::new();
    let plain = Style::plain();
    for d in splits.values().flatten() {
        let styled = world.style(&d.profile) != plain && d.task_id != 4;
        let label = world.schema.values_in_order(&d.profile).join(" ");
        for (_, bot) in d.exchanges() {
            candidates.insert(bot.to_string());
            let styled_reply = styled
                && !bot.starts_with("api_call")
                && !bot.starts_with("here is the information");
            if styled_reply {
                groups
                    .entry(bot.to_string())
                    .and_modify(|g| {
                        if g.as_deref() != Some(label.as_str()) {
                            *g = None;
                        }
                    })
                    .or_insert_with(|| Some(label.clone()));
            }
        }
    }
    for i in 0..world.kb.items().len() {
        for j in 0..world.kb.column_count() {
            candidates.insert(answer(world.kb.entity(i, j)));
        }
    }

    Ok(Corpus {
        schema: world.schema.clone(),
        kb: world.kb.clone(),
        candidates: candidates.into_iter().collect(),
        train: splits.remove(&Split::Train).unwrap_or_default(),
        dev: splits.remove(&Split::Dev).unwrap_or_default(),
        test: splits.remove(&Split::Test).unwrap_or_default(),
        candidate_groups: groups
            .into_iter()
            .filter_map(|(c, g)| g.map(|g| (c, g)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(tasks: Vec<u8>) -> GeneratorConfig {
        GeneratorConfig {
            seed: 5,
            tasks,
            train: 12,
            dev: 4,
            test: 4,
            ..Default::default()
        }
    }

    #[test]
    fn corpus_is_valid_and_deterministic() {
        let cfg = small(vec![1, 2, 3, 4, 5]);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        a.validate().unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.candidates, b.candidates);
        assert_eq!(a.train.len(), 60);
        assert_eq!(a.dev.len(), 20);
        let ids: Vec<usize> = a.all_dialogs().map(|d| d.id).collect();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
        let c = generate(&GeneratorConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn api_call_only_corpus_has_no_fact_lines() {
        let corpus = generate(&small(vec![1])).unwrap();
        assert!(corpus.all_dialogs().all(|d| !d.has_facts()));
        for d in corpus.all_dialogs() {
            let (_, last) = d.exchanges().last().unwrap();
            assert!(last.starts_with("api_call "), "{last}");
        }
    }

    #[test]
    fn information_pairs_differ_only_in_profile_and_contact() {
        let corpus = generate(&small(vec![4])).unwrap();
        let rule = PreferenceRule::default();
        for pair in corpus.train.chunks(2) {
            let [a, b] = pair else { panic!("odd") };
            assert_ne!(
                rule.contact_column(&a.profile),
                rule.contact_column(&b.profile)
            );
            assert_eq!(a.entries.len(), b.entries.len());
            for ((ua, ba), (ub, bb)) in a.exchanges().zip(b.exchanges()) {
                assert_eq!(ua, ub);
                if ua.contains("contact") {
                    assert_ne!(ba, bb);
                } else {
                    assert_eq!(ba, bb);
                }
            }
        }
    }

    #[test]
    fn contact_answers_follow_the_rule() {
        let corpus = generate(&small(vec![4, 5])).unwrap();
        let rule = PreferenceRule::default();
        let mut checked = 0;
        for d in corpus.all_dialogs() {
            let want = rule.contact_column(&d.profile);
            for (u, b) in d.exchanges() {
                if u.contains("contact") {
                    assert!(b.ends_with(&format!("_{want}")), "{b} for {:?}", d.profile);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn styled_candidates_are_grouped_by_profile() {
        let corpus = generate(&small(vec![1])).unwrap();
        assert!(!corpus.candidate_groups.is_empty());
        for (cand, group) in &corpus.candidate_groups {
            let want = if group.contains("female") {
                "madam"
            } else {
                "sir"
            };
            assert!(
                cand.split_whitespace().any(|w| w == want),
                "{cand} / {group}"
            );
        }
        let greet_groups: BTreeSet<&String> = corpus
            .candidate_groups
            .iter()
            .filter(|(c, _)| c.contains("what can i") || c.contains("assistance"))
            .map(|(_, g)| g)
            .collect();
        assert_eq!(greet_groups.len(), 6);
    }

    #[test]
    fn toml_round_trip_and_split_rule() {
        let cfg = GeneratorConfig {
            dialogs: Some(100),
            ..Default::default()
        };
        let back = GeneratorConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let sizes: Vec<usize> = cfg.split_sizes().iter().map(|(_, n)| *n).collect();
        assert_eq!(sizes, vec![70, 15, 15]);
        let partial = GeneratorConfig::from_toml("seed = 3\ntasks = [1]\ntrain = 20\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.dev, 20);
        assert!(GeneratorConfig::from_toml("bogus = 1").is_err());
        assert!(generate(&GeneratorConfig {
            tasks: vec![9],
            ..Default::default()
        })
        .is_err());
    }
}
