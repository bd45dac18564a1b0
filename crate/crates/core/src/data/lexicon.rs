/// Egyptian Arabic generator lexicon with one-word English glosses. Spellings
/// avoid letters and sequences whose Arabizi rendering is ambiguous.
pub const LEXICON: &[(&str, &str)] = &[
    ("حاجة", "thing"),
    ("جامدة", "solid"),
    ("كويس", "good"),
    ("كويسة", "fine"),
    ("بيت", "house"),
    ("شارع", "street"),
    ("عربية", "car"),
    ("ولد", "boy"),
    ("بنت", "girl"),
    ("راجل", "man"),
    ("ست", "woman"),
    ("ناس", "people"),
    ("صاحب", "friend"),
    ("صاحبي", "buddy"),
    ("اكل", "food"),
    ("شرب", "drank"),
    ("نام", "slept"),
    ("قعد", "sat"),
    ("راح", "went"),
    ("مشي", "walked"),
    ("يروح", "goes"),
    ("بيروح", "going"),
    ("عايز", "want"),
    ("عايزة", "wants"),
    ("مش", "not"),
    ("فين", "where"),
    ("امتي", "when"),
    ("ليه", "why"),
    ("ازاي", "how"),
    ("كام", "howmany"),
    ("مين", "who"),
    ("دلوقتي", "now"),
    ("بكرة", "tomorrow"),
    ("النهاردة", "today"),
    ("امبارح", "yesterday"),
    ("الصبح", "morning"),
    ("بالليل", "night"),
    ("شغل", "work"),
    ("شغلانة", "job"),
    ("مدرسة", "school"),
    ("جامعة", "university"),
    ("مكتب", "office"),
    ("فلوس", "money"),
    ("وقت", "time"),
    ("يوم", "day"),
    ("شهر", "month"),
    ("سنة", "year"),
    ("ساعة", "hour"),
    ("دقيقة", "minute"),
    ("كتير", "many"),
    ("قليل", "few"),
    ("شوية", "little"),
    ("خالص", "atall"),
    ("برده", "also"),
    ("تمام", "okay"),
    ("حلو", "nice"),
    ("حلوة", "pretty"),
    ("وحش", "bad"),
    ("وحشة", "ugly"),
    ("كبير", "big"),
    ("صغير", "small"),
    ("جديد", "new"),
    ("قديم", "old"),
    ("سخن", "hot"),
    ("ساقع", "cold"),
    ("مية", "water"),
    ("عيش", "bread"),
    ("رز", "rice"),
    ("لحمة", "meat"),
    ("فراخ", "chicken"),
    ("سمك", "fish"),
    ("قهوة", "coffee"),
    ("شاي", "tea"),
    ("لبن", "milk"),
    ("سكر", "sugar"),
    ("ملح", "salt"),
    ("باب", "door"),
    ("شباك", "window"),
    ("صالة", "room"),
    ("مطبخ", "kitchen"),
    ("سرير", "bed"),
    ("كرسي", "chair"),
    ("ترابيزة", "table"),
    ("تليفون", "phone"),
    ("كمبيوتر", "computer"),
    ("موبايل", "mobile"),
    ("عربي", "arabic"),
    ("مصري", "egyptian"),
    ("بلد", "country"),
    ("مدينة", "city"),
    ("قرية", "village"),
    ("بحر", "sea"),
    ("نيل", "nile"),
    ("شمس", "sun"),
    ("قمر", "moon"),
    ("نجمة", "star"),
    ("مطر", "rain"),
    ("برد", "chill"),
    ("حر", "heat"),
    ("صيف", "summer"),
    ("ربيع", "spring"),
    ("خريف", "autumn"),
    ("اخ", "brother"),
    ("اخت", "sister"),
    ("ام", "mother"),
    ("اب", "father"),
    ("عيلة", "family"),
    ("جوز", "husband"),
    ("مرات", "wife"),
    ("ابن", "son"),
    ("حبيبي", "darling"),
    ("قلب", "heart"),
    ("عين", "eye"),
    ("راس", "head"),
    ("ايد", "hand"),
    ("رجل", "leg"),
    ("بطن", "belly"),
    ("دماغ", "brain"),
    ("شعر", "hair"),
    ("وش", "face"),
    ("كلام", "talk"),
    ("حكاية", "tale"),
    ("قصة", "story"),
    ("كتاب", "book"),
    ("جرنال", "newspaper"),
    ("قلم", "pen"),
    ("ورقة", "paper"),
    ("درس", "lesson"),
    ("امتحان", "exam"),
    ("نجح", "passed"),
    ("فهم", "understood"),
    ("عرف", "knew"),
    ("قال", "said"),
    ("سمع", "heard"),
    ("شاف", "saw"),
    ("بص", "looked"),
    ("كتب", "wrote"),
    ("لعب", "played"),
    ("زعلان", "upset"),
    ("فرحان", "happy"),
    ("تعبان", "tired"),
    ("جعان", "hungry"),
    ("عطشان", "thirsty"),
    ("مبسوط", "pleased"),
    ("مستني", "waiting"),
    ("خلاص", "enough"),
    ("طيب", "alright"),
    ("ماشي", "sure"),
    ("اهو", "here"),
    ("ايوة", "yes"),
    ("معلش", "sorry"),
    ("سلام", "peace"),
    ("صباح", "dawn"),
    ("الخير", "goodness"),
    ("فطار", "breakfast"),
    ("سوق", "market"),
    ("محل", "shop"),
    ("جنيه", "pound"),
    ("غالي", "expensive"),
    ("رخيص", "cheap"),
    ("بياع", "seller"),
    ("زبون", "customer"),
    ("مستشفي", "hospital"),
    ("دكتور", "doctor"),
    ("عيان", "sick"),
    ("صيدلية", "pharmacy"),
    ("طريق", "road"),
    ("كوبري", "bridge"),
    ("ميدان", "square"),
    ("محطة", "station"),
    ("مترو", "metro"),
    ("اتوبيس", "bus"),
    ("تاكسي", "taxi"),
    ("قطر", "train"),
    ("طيارة", "plane"),
    ("مركب", "boat"),
    ("سفر", "travel"),
    ("رحلة", "trip"),
    ("اجازة", "vacation"),
    ("عيد", "feast"),
    ("فرح", "wedding"),
    ("هدية", "gift"),
    ("لعبة", "game"),
    ("كورة", "ball"),
    ("ماتش", "match"),
    ("نادي", "club"),
    ("فريق", "team"),
    ("محمد", "mohamed"),
    ("مدير", "manager"),
    ("مدام", "madam"),
    ("حمدي", "hamdy"),
    ("بحب", "love"),
    ("بيشرب", "drinks"),
    ("بياكل", "eats"),
    ("بينام", "sleeps"),
    ("بيلعب", "plays"),
    ("بيقول", "says"),
    ("بيكتب", "writes"),
    ("بتاع", "belonging"),
    ("هناك", "there"),
    ("جنب", "beside"),
    ("قدام", "front"),
    ("وراه", "behind"),
    ("فوق", "above"),
    ("تحت", "under"),
    ("مع", "with"),
    ("من", "from"),
    ("في", "in"),
    ("علي", "on"),
    ("عشان", "because"),
    ("بس", "only"),
    ("لسة", "still"),
    ("كمان", "more"),
    ("اوي", "very"),
    ("ده", "this"),
    ("دي", "that"),
    ("دول", "those"),
    ("بتاعي", "mine"),
    ("انت", "you"),
    ("هو", "he"),
    ("هي", "she"),
    ("بتاعك", "yours"),
    ("هم", "they"),
    ("الولد", "theboy"),
    ("البنت", "thegirl"),
    ("البيت", "thehouse"),
];

/// Latin-script words allowed to stay in Latin script inside Arabic text.
pub const KEEP_LATIN: &[&str] = &["WiFi", "code", "programming", "scroll", "subscribe", "remote", "meeting", "app", "USB"];

pub fn egyptian_words() -> impl Iterator<Item = &'static str> {
    LEXICON.iter().map(|(w, _)| *w)
}

/// The ASCII base-domain lexicon.
pub fn english_words() -> impl Iterator<Item = &'static str> {
    LEXICON.iter().map(|(_, g)| *g)
}

pub fn gloss(word: &str) -> Option<&'static str> {
    LEXICON.iter().find(|(w, _)| *w == word).map(|(_, g)| *g)
}

pub fn from_gloss(gloss: &str) -> Option<&'static str> {
    LEXICON.iter().find(|(_, g)| *g == gloss).map(|(w, _)| *w)
}

/// Arabic-script letters and sequences excluded from lexicon spellings.
pub const EXCLUDED_LETTERS: &[char] = &['ث', 'ذ', 'ض', 'ظ', 'ء', 'أ', 'إ', 'آ', 'ى', 'ئ', 'ؤ'];
pub const EXCLUDED_SEQUENCES: &[&str] = &["كه", "سه", "جه"];
