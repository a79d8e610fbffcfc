//! Built-in dialog domains: restaurant, weather, bus and movie.
//!
//! Slot values are lowercase single tokens (multiword values hyphenated) so
//! the copy mechanism stays per-token. Each informable slot carries a
//! distinguished dont-care value that the KB query treats as a wildcard.
//! Movie templates are deliberately structured unlike the other three
//! domains, since it serves as the held-out adaptation target.

use std::collections::BTreeMap;

use crate::schema::{DomainSpec, InformableSlot, RequestableSlot};

fn acts(pairs: &[(&str, &[&str])]) -> BTreeMap<String, Vec<String>> {
    pairs
        .iter()
        .map(|(act, ts)| (act.to_string(), ts.iter().map(|s| s.to_string()).collect()))
        .collect()
}

fn inf(name: &str, values: &[&str], dont_care: &str) -> InformableSlot {
    InformableSlot {
        name: name.into(),
        values: values.iter().map(|s| s.to_string()).collect(),
        dont_care: dont_care.into(),
    }
}

fn req(name: &str, values: &[&str]) -> RequestableSlot {
    RequestableSlot {
        name: name.into(),
        values: values.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn restaurant() -> DomainSpec {
    DomainSpec {
        name: "restaurant".into(),
        informable_slots: vec![
            inf(
                "loc",
                &["philadelphia", "seattle", "boston", "austin", "denver", "chicago", "portland", "miami"],
                "anywhere",
            ),
            inf(
                "food_pref",
                &["indian", "thai", "mexican", "italian", "korean", "ethiopian", "french", "vegan"],
                "any-cuisine",
            ),
        ],
        requestable_slots: vec![
            req("price", &["cheap", "moderate", "expensive", "very-cheap", "mid-range"]),
            req("parking", &["street-parking", "valet", "garage", "no-parking", "free-lot"]),
            req("opening", &["open-now", "closed-now", "opens-at-noon", "open-all-day", "weekends-only"]),
        ],
        entity_name_pattern: "restaurant-{id}".into(),
        user_templates: acts(&[
            ("greet", &[
                "what is up i am looking for a restaurant today",
                "hi there i would love to find a place to eat",
                "hello i want to grab some food somewhere nice",
                "hey can you help me find a restaurant please",
                "good day i am hoping to book a restaurant soon",
            ]),
            ("inform", &[
                "i would like {value} if that works for you",
                "let us go with {value} please that sounds good",
                "{value} would be my pick for this one thanks",
                "i am thinking {value} works best for me today",
                "make it {value} for me if you can",
            ]),
            ("dont_care", &[
                "{value} is fine really i do not mind at all",
                "honestly {value} works i have no strong preference here",
                "{value} suits me whatever you have is okay",
                "i will take {value} it does not matter much",
                "{value} please any option is good with me",
            ]),
            ("self_correct", &[
                "i want {wrong} oh sorry i mean {value} actually",
                "{wrong} no wait scratch that make it {value} please",
                "let us say {wrong} hmm actually {value} is better",
                "maybe {wrong} oh hold on i meant {value} instead",
                "i said {wrong} but sorry i really want {value}",
            ]),
            ("request", &[
                "i have more requests what is the {slot} of it",
                "one more thing could you tell me the {slot} please",
                "not done yet what about the {slot} of that place",
                "can you also let me know its {slot} now",
                "thanks and what is the {slot} for this restaurant",
            ]),
            ("new_goal", &[
                "new request i am interested in food at {value} now",
                "actually let us start over i want {value} this time",
                "change of plans please look for {value} instead now",
                "wait i changed my mind make it {value} please",
                "on second thought i would rather have {value} now",
            ]),
            ("affirm", &[
                "uh-huh yes that is exactly what i meant",
                "yes please that is right go ahead with it",
                "correct that is the one i was thinking of",
                "yeah exactly keep that one for me thanks",
                "that is right please continue with that choice",
            ]),
            ("bye", &[
                "i have all i need see you later",
                "that is everything thanks a lot bye for now",
                "great that covers it all goodbye and thank you",
                "perfect nothing else from me see you next time",
                "all set thanks so much talk to you later",
            ]),
        ]),
        nlg_templates: acts(&[
            ("ask", &[
                "which {slot} do you have in mind for this",
                "sure thing what {slot} would you like to go with",
                "okay can you tell me your preferred {slot} please",
                "happy to help which {slot} should i search for",
                "got it and what {slot} are you looking for",
            ]),
            ("present", &[
                "<name> is a good choice anything else for you",
                "i recommend <name> it fits all your needs nicely",
                "how about <name> it matches what you asked for",
                "<name> looks perfect for you what else can i do",
                "you should try <name> is there anything else",
            ]),
            ("no_match", &[
                "sorry nothing matches those requirements could you change one",
                "i found no restaurant like that maybe adjust your constraints",
                "no results there i am afraid please try something different",
                "unfortunately nothing fits that request would you like to change it",
                "there is no match in my records please revise one requirement",
            ]),
            ("answer", &[
                "the {slot} is <{slot}> anything else i can do",
                "for that place the {slot} is <{slot}> what else",
                "its {slot} is <{slot}> can i help with more",
                "sure the {slot} there is <{slot}> anything further",
                "that one has {slot} <{slot}> is there anything else",
            ]),
            ("confirm", &[
                "i believe you said {value} is that right",
                "just to check you want {value} correct",
                "so that would be {value} did i get it",
                "you mean {value} then is that correct",
                "let me confirm {value} is what you want",
            ]),
            ("bye", &[
                "see you next time and have a great meal",
                "goodbye enjoy your food and come back any time",
                "glad i could help have a wonderful day bye",
                "thanks for stopping by see you again soon",
                "you are welcome goodbye and enjoy your restaurant",
            ]),
        ]),
    }
}

pub fn weather() -> DomainSpec {
    DomainSpec {
        name: "weather".into(),
        informable_slots: vec![
            inf(
                "loc",
                &["london", "paris", "tokyo", "sydney", "cairo", "moscow", "toronto", "berlin"],
                "anywhere",
            ),
            inf(
                "datetime",
                &["today", "tomorrow", "tonight", "monday", "wednesday", "friday", "weekend", "next-week"],
                "anytime",
            ),
        ],
        requestable_slots: vec![
            req("temperature", &["freezing", "cold", "mild", "warm", "hot"]),
            req("weather_type", &["sunny", "rainy", "cloudy", "snowy", "windy"]),
        ],
        entity_name_pattern: "forecast-{id}".into(),
        user_templates: acts(&[
            ("greet", &[
                "hello i need a weather report for my plans",
                "hi could you check the weather forecast for me",
                "hey i want to know about the weather somewhere",
                "good morning i would like a quick weather update",
                "hi there help me with a weather question please",
            ]),
            ("inform", &[
                "could you check {value} for me please if you could",
                "i am asking about {value} this time around thank you",
                "let us take a look at {value} please thank you",
                "{value} is the one i care about right now",
                "please go with {value} for this particular forecast thanks",
            ]),
            ("dont_care", &[
                "{value} honestly whichever you have is fine",
                "i will take {value} no preference at all",
                "{value} works for me it really does not matter",
                "just {value} please anything you have is okay",
                "{value} suits me i am flexible on this one",
            ]),
            ("self_correct", &[
                "check {wrong} oh wait no i meant {value} sorry",
                "{wrong} hmm actually make that {value} instead please",
                "i said {wrong} but i really meant {value} there",
                "let us do {wrong} no sorry {value} is correct",
                "maybe {wrong} oh hold on it should be {value}",
            ]),
            ("request", &[
                "and what will the {slot} be like then",
                "could you also tell me the {slot} please",
                "one more thing what about the {slot} there",
                "i also want to know the {slot} for that",
                "okay now give me the {slot} if you can",
            ]),
            ("new_goal", &[
                "new question now i want the forecast for {value}",
                "actually switch it up check {value} for me instead",
                "hold on let us change that to {value} now",
                "scratch that i would rather hear about {value} please",
                "wait i need {value} instead can you redo it",
            ]),
            ("affirm", &[
                "uh-huh yes that is exactly the one i meant",
                "yes exactly that please go ahead with it",
                "right that is correct please continue with that one",
                "yeah that is what i wanted thanks a lot",
                "correct please keep going with that forecast",
            ]),
            ("bye", &[
                "that is all i wanted to know thanks bye now",
                "great thanks a lot for the forecast see you later",
                "perfect i have everything that i need goodbye now",
                "all good thanks a bunch talk to you soon",
                "thanks that covers everything have a nice day",
            ]),
        ]),
        nlg_templates: acts(&[
            ("ask", &[
                "sure which {slot} should i check for you today",
                "happy to help with that what {slot} do you want",
                "okay tell me the {slot} you are interested in",
                "no problem at all which {slot} would you like checked",
                "of course and what {slot} should this forecast cover",
            ]),
            ("present", &[
                "i pulled up <name> for you anything else",
                "here is <name> matching your question what else",
                "<name> covers that request is there anything else",
                "found it <name> has your answer anything more",
                "<name> is the report you need what else",
            ]),
            ("no_match", &[
                "sorry i have no forecast for that maybe change something",
                "no report matches that request please adjust one detail",
                "i could not find that forecast try a different option",
                "nothing matches i am afraid would you like to revise it",
                "unfortunately there is no data for that please change one thing",
            ]),
            ("answer", &[
                "the {slot} will be <{slot}> anything else today",
                "you can expect the {slot} to be <{slot}> what else",
                "it shows a {slot} of <{slot}> can i help with more",
                "the report says the {slot} is <{slot}> anything else",
                "looks like the {slot} is <{slot}> what else can i do",
            ]),
            ("confirm", &[
                "so you want the forecast for {value} is that right",
                "let me double check that you said {value} correct",
                "did you mean {value} just now when you said that",
                "to confirm the forecast should cover {value} yes",
                "i heard {value} there is that what you meant",
            ]),
            ("bye", &[
                "goodbye stay dry out there and have a lovely day",
                "see you next time enjoy the weather out there",
                "take care of yourself and thanks for checking in bye",
                "glad to help have a wonderful day goodbye",
                "you are very welcome see you again soon bye",
            ]),
        ]),
    }
}

pub fn bus() -> DomainSpec {
    DomainSpec {
        name: "bus".into(),
        informable_slots: vec![
            inf(
                "from_loc",
                &["downtown", "airport", "university", "harbor", "stadium", "museum"],
                "any-origin",
            ),
            inf(
                "to_loc",
                &["mall", "hospital", "library", "zoo", "station", "beach"],
                "any-destination",
            ),
            inf(
                "time",
                &["morning", "noon", "afternoon", "evening", "night", "midnight"],
                "whenever",
            ),
        ],
        requestable_slots: vec![
            req("arrival", &["on-time", "delayed", "early", "in-ten-minutes", "in-one-hour"]),
            req("fare", &["one-dollar", "two-dollars", "three-dollars", "five-dollars", "free"]),
        ],
        entity_name_pattern: "route-{id}".into(),
        user_templates: acts(&[
            ("greet", &[
                "hi i need to catch a bus somewhere today",
                "hello i am trying to plan a bus trip",
                "hey there i want to find a bus route",
                "good day could you help me take a bus",
                "hi can you look up a bus connection for me",
            ]),
            ("inform", &[
                "{value} please that is the one i need today",
                "it should be {value} for this trip thanks a lot",
                "please put down {value} for me if you would kindly",
                "i am going to go with {value} on this one",
                "for that one let us say {value} please thanks",
            ]),
            ("dont_care", &[
                "{value} is okay with me i am not picky here",
                "honestly {value} any option you have works for me",
                "{value} please it truly does not matter to me",
                "i will just go with {value} whatever is available",
                "{value} works for me i have no preference at all",
            ]),
            ("self_correct", &[
                "{wrong} er sorry i actually meant {value} my mistake",
                "make it {wrong} no wait {value} is the right one",
                "i said {wrong} just now but actually {value} please",
                "let us try {wrong} hmm no make it {value} instead",
                "{wrong} oh sorry that really should be {value} instead",
            ]),
            ("request", &[
                "also what is the {slot} for that bus please",
                "can you tell me the {slot} for it as well",
                "and i also need to know the {slot} please",
                "one more question though what about the {slot} there",
                "okay so what is the {slot} looking like right now",
            ]),
            ("new_goal", &[
                "new plan actually i want to leave from {value} instead",
                "hold on please change that to {value} for me",
                "actually scratch that part let us use {value} instead",
                "wait i need {value} this time can you redo that",
                "on second thought make that one {value} please thanks",
            ]),
            ("affirm", &[
                "uh-huh yes that route is the one i meant",
                "yes exactly that bus please go on with it",
                "correct that is the exact trip i meant there",
                "yeah that one works for me keep it please",
                "right that is it thanks please continue with that",
            ]),
            ("bye", &[
                "that is everything i needed today goodbye for now",
                "great i am all set now thanks and bye",
                "perfect that covers my whole trip see you later",
                "thanks a lot that is all from me today",
                "all done over here thank you and goodbye now",
            ]),
        ]),
        nlg_templates: acts(&[
            ("ask", &[
                "sure thing what {slot} should i use for the search",
                "okay and which {slot} do you have in mind",
                "no problem just tell me the {slot} you want",
                "alright then what {slot} works best for your trip",
                "got it and which {slot} should i look for",
            ]),
            ("present", &[
                "<name> fits your trip anything else i can do",
                "you can take <name> it matches your plan what else",
                "i found <name> for your trip is there anything else",
                "<name> will work nicely for that journey anything more",
                "your best option is <name> what else can i do",
            ]),
            ("no_match", &[
                "sorry no route matches that plan maybe change something",
                "i cannot find such a bus please adjust one detail",
                "no connection fits that request try a different option",
                "unfortunately nothing runs like that would you like to change it",
                "there is no matching route please revise one requirement",
            ]),
            ("answer", &[
                "the {slot} for that one is <{slot}> anything else",
                "that bus has a {slot} of <{slot}> what else",
                "its {slot} comes out to <{slot}> can i help more",
                "expect the {slot} to be <{slot}> anything further",
                "the {slot} there is <{slot}> what else can i do",
            ]),
            ("confirm", &[
                "just checking here you said {value} right then",
                "so the trip should use {value} is that correct",
                "did you mean {value} for this route just now",
                "let me quickly confirm that {value} yes or no",
                "i understood {value} from that is it correct",
            ]),
            ("bye", &[
                "goodbye now and have a safe trip out there",
                "see you next time and enjoy the bus ride",
                "take care out there and thanks for riding with us",
                "glad i could help have a smooth journey bye",
                "you are very welcome safe travels and goodbye now",
            ]),
        ]),
    }
}

pub fn movie() -> DomainSpec {
    DomainSpec {
        name: "movie".into(),
        informable_slots: vec![
            inf(
                "genre",
                &["western", "comedy", "horror", "sci-fi", "drama", "animation", "thriller", "noir"],
                "any-genre",
            ),
            inf(
                "year",
                &["50s", "60s", "70s", "80s", "90s", "2000s", "2010s"],
                "any-era",
            ),
            inf(
                "country",
                &["usa", "france", "japan", "india", "italy", "mexico", "germany", "china"],
                "any-country",
            ),
        ],
        requestable_slots: vec![
            req("rating", &["one-star", "two-stars", "three-stars", "four-stars", "five-stars"]),
            req("company", &["redwood-films", "bluefin-media", "starlight-pictures", "ironwood-studio", "harborline-films"]),
        ],
        entity_name_pattern: "film-{id}".into(),
        // user and system phrasings here intentionally share few constructions
        // with the source domains
        user_templates: acts(&[
            ("greet", &[
                "movie night is coming recommend me a film soon",
                "so i am hunting for a film worth watching",
                "a film recommendation is what i came here for",
                "tonight calls for a movie got any ideas",
                "film suggestions needed my watchlist is totally empty",
            ]),
            ("inform", &[
                "something {value} maybe that is truly my mood tonight",
                "the {value} ones are what i keep coming back to",
                "definitely {value} nothing else will do for me tonight",
                "my taste says {value} tonight so search for that one",
                "somewhere in the {value} category please look there first",
            ]),
            ("dont_care", &[
                "{value} frankly just surprise me on this one",
                "no strong taste over here {value} will do fine",
                "{value} since whichever one you pick i will watch",
                "on that little detail {value} i am easy going",
                "pick one for me {value} is totally acceptable here",
            ]),
            ("self_correct", &[
                "{wrong} films hmm scratch that {value} ones actually",
                "did i just say {wrong} my bad {value} please",
                "{wrong} no no i keep mixing up {value} please",
                "forget {wrong} because the mood tonight is {value} truly",
                "not {wrong} after all let us hunt {value} ones",
            ]),
            ("request", &[
                "before i watch it though tell me its {slot}",
                "curious though about what {slot} that film might carry",
                "its {slot} matters a lot to me share that please",
                "hit me with the {slot} of this one then",
                "good and now the {slot} is what i wonder about",
            ]),
            ("new_goal", &[
                "plot twist because tonight i crave {value} films instead",
                "rewind that search and swap in {value} for me",
                "a mood shift happened {value} is the new target",
                "toss out the old idea {value} films only now",
                "different direction please because {value} is calling me tonight",
            ]),
            ("affirm", &[
                "spot on that is precisely the film vibe yes",
                "bingo that matches what i was picturing exactly right",
                "yep you nailed it roll with that one please",
                "that reading is correct so carry on with it",
                "you got it that is the very film i meant",
            ]),
            ("bye", &[
                "popcorn time then nothing more from me tonight farewell",
                "my evening is sorted thanks a million farewell",
                "enough browsing for me the couch awaits goodbye then",
                "that wraps up the movie hunt cheers and farewell",
                "search complete i am rolling credits on this chat goodbye",
            ]),
        ]),
        nlg_templates: acts(&[
            ("ask", &[
                "to narrow the list down name a {slot} first",
                "plenty of options share your {slot} and i will filter",
                "your {slot} preference would help me search much better",
                "first things first then which {slot} shall i filter by",
                "give me a {slot} and the search gets much easier",
            ]),
            ("present", &[
                "my pick lands on <name> do you need anything more",
                "the catalog points to <name> further questions welcome",
                "screening suggestion ready <name> should fit your taste well",
                "after filtering <name> comes out on top anything else",
                "<name> rises to the top of the list what next",
            ]),
            ("no_match", &[
                "the catalog runs dry there loosen one filter please",
                "zero titles survive those filters try relaxing a requirement",
                "that combination returns an empty shelf adjust one choice",
                "no film checks every box there swap one filter",
                "my listings show nothing like that rethink one detail",
            ]),
            ("answer", &[
                "on the {slot} front it shows <{slot}> any more questions",
                "records list its {slot} as <{slot}> anything else",
                "that title carries a {slot} of <{slot}> so what next",
                "checking the {slot} for you it reads <{slot}> need more",
                "the {slot} entry says <{slot}> further questions welcome",
            ]),
            ("confirm", &[
                "reading that back does {value} sound about right to you",
                "the new filter being {value} if i follow you correctly",
                "so {value} replaces the old pick is that a yes",
                "catching up here so {value} is the request now yes",
                "your words point to {value} please confirm that for me",
            ]),
            ("bye", &[
                "enjoy the screening and swing by again farewell",
                "lights down and popcorn up see you after the credits",
                "happy watching and may the film live up to it",
                "signing off now enjoy your movie night out there",
                "farewell for now and save me a seat next time",
            ]),
        ]),
    }
}

/// All built-in domains, source-first ordering.
pub fn builtin(name: &str) -> Option<DomainSpec> {
    match name {
        "restaurant" => Some(restaurant()),
        "weather" => Some(weather()),
        "bus" => Some(bus()),
        "movie" => Some(movie()),
        _ => None,
    }
}

pub const BUILTIN_NAMES: [&str; 4] = ["restaurant", "weather", "bus", "movie"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtin_domains_validate() {
        for name in BUILTIN_NAMES {
            let spec = builtin(name).unwrap();
            spec.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn every_act_has_at_least_five_templates() {
        for name in BUILTIN_NAMES {
            let spec = builtin(name).unwrap();
            for (act, ts) in spec.user_templates.iter().chain(&spec.nlg_templates) {
                assert!(ts.len() >= 5, "{name}/{act} has {} templates", ts.len());
            }
        }
    }

    #[test]
    fn entity_names_are_single_tokens() {
        for name in BUILTIN_NAMES {
            let spec = builtin(name).unwrap();
            let n = spec.entity_name(65);
            assert!(!n.contains(' '), "entity name '{n}' is not a single token");
        }
    }

    #[test]
    fn unknown_domain_is_none() {
        assert!(builtin("banking").is_none());
    }
}
