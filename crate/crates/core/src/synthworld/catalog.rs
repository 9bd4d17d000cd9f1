//! Fixed vocabulary of the synthetic world: cuisines, weather, mealtimes and
//! regions, with the attributes the ground-truth click model reads.

pub struct Cuisine {
    pub tag: &'static str,
    pub dishes: [&'static str; 6],
    pub name_words: [&'static str; 4],
    /// +1 for food eaten hot, -1 for food eaten cold.
    pub warmth: f64,
    /// Affinity per mealtime, indexed like [`TIMESLOTS`].
    pub slot_affinity: [f64; 4],
}

pub const CUISINES: &[Cuisine] = &[
    Cuisine {
        tag: "hotpot",
        dishes: ["spicy beef hotpot", "mushroom broth", "lamb slices", "tofu skin", "glass noodles", "chili oil dip"],
        name_words: ["Ember", "Red Pot", "Fire", "Simmer"],
        warmth: 1.0,
        slot_affinity: [-1.0, 0.2, 1.0, 0.7],
    },
    Cuisine {
        tag: "ice cream",
        dishes: ["vanilla cone", "mango sorbet", "matcha sundae", "berry gelato", "chocolate scoop", "waffle bowl"],
        name_words: ["Frost", "Scoop", "Polar", "Sundae"],
        warmth: -1.0,
        slot_affinity: [-0.8, 0.3, 0.1, 0.6],
    },
    Cuisine {
        tag: "noodle soup",
        dishes: ["beef noodle soup", "wonton noodles", "miso ramen", "pho", "udon", "dan dan noodles"],
        name_words: ["Slurp", "Broth", "Long Noodle", "Ramen"],
        warmth: 0.8,
        slot_affinity: [0.5, 0.9, 0.2, 0.3],
    },
    Cuisine {
        tag: "sushi",
        dishes: ["salmon nigiri", "tuna roll", "eel rice", "cucumber maki", "sashimi set", "miso soup"],
        name_words: ["Wave", "Tide", "Koi", "Umi"],
        warmth: -0.5,
        slot_affinity: [-1.0, 0.8, 0.6, -0.4],
    },
    Cuisine {
        tag: "bbq skewers",
        dishes: ["lamb skewers", "grilled corn", "chicken wings", "beef skewers", "grilled squid", "garlic eggplant"],
        name_words: ["Smoke", "Charcoal", "Grill", "Skewer"],
        warmth: 0.5,
        slot_affinity: [-1.0, -0.3, 0.5, 1.0],
    },
    Cuisine {
        tag: "congee",
        dishes: ["pork congee", "century egg congee", "fried dough", "pickled greens", "fish congee", "soy milk"],
        name_words: ["Morning", "Rice Pot", "Dawn", "Porridge"],
        warmth: 0.7,
        slot_affinity: [1.0, 0.0, -0.4, 0.3],
    },
    Cuisine {
        tag: "salad bowls",
        dishes: ["chicken caesar", "quinoa bowl", "greek salad", "avocado bowl", "tuna salad", "fruit cup"],
        name_words: ["Green", "Leaf", "Fresh", "Garden"],
        warmth: -0.8,
        slot_affinity: [-0.2, 1.0, 0.1, -0.9],
    },
    Cuisine {
        tag: "pizza",
        dishes: ["margherita", "pepperoni pizza", "four cheese", "garlic bread", "veggie pizza", "hawaiian pizza"],
        name_words: ["Pizza", "Oven", "Crust", "Slice"],
        warmth: 0.2,
        slot_affinity: [-0.9, 0.4, 0.6, 0.8],
    },
    Cuisine {
        tag: "dumplings",
        dishes: ["pork dumplings", "shrimp dumplings", "leek dumplings", "soup buns", "pan fried buns", "sour soup"],
        name_words: ["Jade", "Dumpling", "Steam", "Bun"],
        warmth: 0.6,
        slot_affinity: [0.8, 0.6, 0.4, 0.0],
    },
    Cuisine {
        tag: "bubble tea",
        dishes: ["milk tea", "taro slush", "brown sugar boba", "fruit tea", "cheese foam tea", "grass jelly"],
        name_words: ["Pearl", "Boba", "Tea Leaf", "Bubble"],
        warmth: -0.9,
        slot_affinity: [-0.3, 0.5, 0.2, 0.4],
    },
    Cuisine {
        tag: "curry",
        dishes: ["chicken curry", "lentil dal", "naan", "beef rendang", "paneer masala", "saffron rice"],
        name_words: ["Spice", "Saffron", "Masala", "Curry"],
        warmth: 0.7,
        slot_affinity: [-0.6, 0.6, 0.9, 0.1],
    },
    Cuisine {
        tag: "burgers",
        dishes: ["cheeseburger", "fries", "chicken burger", "onion rings", "veggie burger", "milkshake"],
        name_words: ["Patty", "Bun Town", "Stack", "Burger"],
        warmth: 0.1,
        slot_affinity: [-0.5, 0.7, 0.5, 0.6],
    },
];

pub const NAME_SUFFIXES: &[&str] = &["House", "Kitchen", "Corner", "Bar", "Palace", "Stop", "Garden", "Co"];

pub struct Weather {
    pub name: &'static str,
    /// Positive when the weather makes people want warm food.
    pub chill: f64,
    pub mean_temperature: f64,
}

pub const WEATHERS: &[Weather] = &[
    Weather { name: "sunny", chill: -1.0, mean_temperature: 31.0 },
    Weather { name: "rainy", chill: 0.4, mean_temperature: 15.0 },
    Weather { name: "snowy", chill: 1.0, mean_temperature: -3.0 },
    Weather { name: "cloudy", chill: 0.0, mean_temperature: 21.0 },
    Weather { name: "windy", chill: 0.5, mean_temperature: 10.0 },
    Weather { name: "humid", chill: -0.7, mean_temperature: 28.0 },
];

pub const TIMESLOTS: &[&str] = &["breakfast", "lunch", "dinner", "late night"];

pub const REGIONS: &[&str] = &["Northshore", "Eastvale", "Southport", "Westbrook"];

pub const TEMPERATURE_BINS: &[(f64, &str)] = &[
    (0.0, "freezing"),
    (10.0, "cold"),
    (20.0, "mild"),
    (28.0, "warm"),
    (f64::INFINITY, "hot"),
];

pub fn temperature_bin(t: f64) -> usize {
    TEMPERATURE_BINS
        .iter()
        .position(|&(upper, _)| t < upper)
        .unwrap_or(TEMPERATURE_BINS.len() - 1)
}

pub const NICK_SYLLABLES: &[&str] = &["ka", "mi", "ro", "ta", "le", "no", "su", "vi", "an", "jo", "el", "ri"];

pub const GENDERS: &[&str] = &["female", "male", "unspecified"];
